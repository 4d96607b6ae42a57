#![no_main]

use asfnet::config::Config;
use asfnet::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = Config::from_json(data) {
        let again = Config::from_json(&format::json_bytes(&config)).expect("re-encoded config parses");
        assert_eq!(again, config);
        let _ = config.network().output_size(64, 64);
    }
});

#![no_main]

use asfnet::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = format::decode_asft(data) {
        assert_eq!(format::asft_bytes(&t), data);
    }
});

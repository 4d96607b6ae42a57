#![no_main]

use asfnet::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = format::decode_checkpoint(data) {
        let again = format::decode_checkpoint(&format::encode_checkpoint(&ck.params, ck.mask.as_ref()))
            .expect("re-encoded checkpoint decodes");
        assert_eq!(again, ck);
    }
});

#![no_main]

use asfnet::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(gray) = format::decode_pgm(data) {
        assert!(gray.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(img) = format::decode_image(data) {
        assert_eq!(img.c(), 3);
    }
});

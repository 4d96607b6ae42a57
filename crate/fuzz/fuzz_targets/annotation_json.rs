#![no_main]

use asfnet::density::{generate_density_map, GtParams};
use asfnet::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ann) = format::decode_annotation(data) {
        if ann.width * ann.height <= 1 << 16 && ann.points.len() <= 256 {
            let _ = generate_density_map(&ann, &GtParams::default());
        }
    }
});

#![no_main]

use asfnet::dataset::Manifest;
use asfnet::density::GtParams;
use asfnet::format;
use asfnet::synth::SynthSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = format::parse_json::<Manifest>(data, "manifest");
    if let Ok(gt) = format::parse_json::<GtParams>(data, "gt") {
        let _ = gt.validate();
    }
    if let Ok(spec) = format::parse_json::<SynthSpec>(data, "spec") {
        let _ = spec.validate();
    }
});

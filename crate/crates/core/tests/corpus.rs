use std::path::{Path, PathBuf};

use asfnet::dataset::Manifest;
use asfnet::density::GtParams;
use asfnet::format;
use asfnet::synth::SynthSpec;
use asfnet::Config;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn asft_seeds_decode_and_reencode() {
    for (path, bytes) in seeds("asft_decode") {
        let t = format::decode_asft(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(format::asft_bytes(&t), bytes, "{}", path.display());
    }
}

#[test]
fn asfc_seeds_decode_and_reencode() {
    for (path, bytes) in seeds("asfc_decode") {
        let ck = format::decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(format::encode_checkpoint(&ck.params, ck.mask.as_ref()), bytes, "{}", path.display());
    }
}

#[test]
fn image_seeds_decode_to_three_channels() {
    for (path, bytes) in seeds("image_decode") {
        let img = format::decode_image(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(img.c(), 3, "{}", path.display());
    }
}

#[test]
fn annotation_seeds_decode() {
    for (path, bytes) in seeds("annotation_json") {
        format::decode_annotation(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn config_seeds_decode() {
    for (path, bytes) in seeds("config_json") {
        Config::from_json(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn dataset_seeds_decode_as_their_type() {
    for (path, bytes) in seeds("dataset_json") {
        let name = path.file_stem().unwrap().to_str().unwrap();
        let ok = match name {
            "manifest" => format::parse_json::<Manifest>(&bytes, name).is_ok(),
            "gt" => format::parse_json::<GtParams>(&bytes, name).is_ok_and(|g| g.validate().is_ok()),
            "spec" => format::parse_json::<SynthSpec>(&bytes, name).is_ok_and(|s| s.validate().is_ok()),
            other => panic!("unexpected seed {other}"),
        };
        assert!(ok, "{}", path.display());
    }
}

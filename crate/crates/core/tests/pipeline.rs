use asfnet::autodiff::{grad_check, GradCheckOptions, Tape, Var};
use asfnet::conv::ConvSpec;
use asfnet::dataset::{make_sample, write_synth_dataset, Dataset};
use asfnet::density::GtParams;
use asfnet::format;
use asfnet::prune::{prune, Criterion};
use asfnet::synth::{synth_scene, SynthSpec};
use asfnet::train::{checkpoint_path, train, Sample, TrainConfig, TrainOptions};
use asfnet::{Error, NetworkConfig, Params, Tensor};

fn small_samples(net: &NetworkConfig, n: usize) -> Vec<Sample> {
    let spec = SynthSpec {
        width: 32,
        height: 32,
        scenes: n,
        ..SynthSpec::default()
    };
    (0..n)
        .map(|i| {
            let (img, ann) = synth_scene(&spec, i).unwrap();
            make_sample(net, &GtParams::default(), img, &ann).unwrap()
        })
        .collect()
}

#[test]
fn two_layer_conv_stack_gradients_match_finite_differences() {
    let a = ConvSpec::same(2, 3, 3, 1);
    let b = ConvSpec::same(3, 2, 3, 2);
    let graph = move |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| {
        let w1 = tape.param(p, "a.weight")?;
        let b1 = tape.param(p, "a.bias")?;
        let h = tape.conv2d(x[0], w1, Some(b1), &a)?;
        let h = tape.relu(h)?;
        let w2 = tape.param(p, "b.weight")?;
        let b2 = tape.param(p, "b.bias")?;
        tape.conv2d(h, w2, Some(b2), &b)
    };
    for seed in 0..5 {
        let mut rng = asfnet::init::rng(seed);
        let mut params = Params::new();
        asfnet::init::init_conv(&mut params, "a", &a, &mut rng);
        asfnet::init::init_conv(&mut params, "b", &b, &mut rng);
        let params: Params<f64> = params.cast();
        let x = Tensor::from_fn([1, 2, 7, 6], |[_, c, h, w]| ((c * 31 + h * 7 + w * 3 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        let report = grad_check(&graph, &params, &[x], GradCheckOptions::default()).unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn every_backbone_parameter_receives_gradient() {
    let net = NetworkConfig::default();
    let params = net.init_params(3);
    let image = Tensor::from_fn([1, 3, 32, 32], |[_, c, h, w]| ((c + 2 * h + 3 * w) % 13) as f32 / 13.0);
    let target = Tensor::full([1, 1, 16, 16], 0.05f32);
    let (_, grads) = asfnet::train::loss_and_grads(&net, &params, &image, &target).unwrap();
    for (name, _) in params.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        let g = grads.param(name).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetworkConfig::default();
    let samples = small_samples(&net, 3);
    let config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 4,
        shuffle: true,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        mask: None,
    };
    let a = train(&net, net.init_params(1), &samples, &config, &options).unwrap();
    let b = train(&net, net.init_params(1), &samples, &config, &TrainOptions::default()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.steps, 12);
    assert_eq!(a.checkpoints, vec![checkpoint_path(dir.path(), 2), checkpoint_path(dir.path(), 4)]);
    let reloaded = format::read_checkpoint(&a.checkpoints[1]).unwrap();
    assert_eq!(reloaded.params, a.params);
    assert!(reloaded.mask.is_none());
}

#[test]
fn divergence_reports_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetworkConfig::default();
    let samples = small_samples(&net, 2);
    let config = TrainConfig {
        learning_rate: 1e30,
        epochs: 20,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        mask: None,
    };
    match train(&net, net.init_params(0), &samples, &config, &options) {
        Err(Error::Diverged { epoch, last_good }) => {
            if epoch > 0 {
                assert_eq!(last_good, Some(checkpoint_path(dir.path(), epoch)));
            } else {
                assert_eq!(last_good, None);
            }
        }
        Ok(out) => panic!("lr 1e30 trained for {} steps without diverging", out.steps),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn structured_mask_survives_training_and_checkpointing() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetworkConfig::default();
    let samples = small_samples(&net, 2);
    let (pruned, mask) = prune(&net.init_params(2), Criterion::L2StructuredChannel, 0.25).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        mask: Some(mask.clone()),
    };
    let out = train(&net, pruned, &samples, &config, &options).unwrap();
    let ck = format::read_checkpoint(&out.checkpoints[0]).unwrap();
    assert_eq!(ck.mask.as_ref(), Some(&mask));
    for (name, m) in mask.iter() {
        let p = ck.params.get(name).unwrap();
        for (v, k) in p.data().iter().zip(m.data()) {
            if *k == 0.0 {
                assert_eq!(*v, 0.0, "{name}");
            }
        }
    }
}

#[test]
fn dataset_samples_match_network_output_size() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        width: 48,
        height: 32,
        scenes: 2,
        ..SynthSpec::default()
    };
    write_synth_dataset(&spec, dir.path()).unwrap();
    let ds = Dataset::load(&dir.path().join("manifest.json")).unwrap();
    let net = NetworkConfig::default();
    for (s, ann) in ds.samples(&net, &GtParams::default()).unwrap().iter().zip(&ds.annotations) {
        assert_eq!(s.target.dims(), [1, 1, 16, 24]);
        let n = ann.count() as f64;
        assert!((s.target.sum_f64() - n).abs() <= 1e-4 * n.max(1.0));
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
}

use asfnet::conv::{conv2d, conv2d_backward, ConvSpec};
use asfnet::cost::{conv_flops, count_cost};
use asfnet::density::{generate_density_map, pool_to, GtParams, SceneAnnotation};
use asfnet::format;
use asfnet::metrics::count_metrics;
use asfnet::network::NetworkConfig;
use asfnet::prune::{l1_prune_count, prune, sparsity_report, Criterion};
use asfnet::resize::{bicubic_resize, bicubic_resize_backward};
use asfnet::tensor::{concat_channels, slice_channels};
use asfnet::{Params, Tensor};
use proptest::prelude::*;

fn tensor_f64(dims: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |v| Tensor::new(dims, v).unwrap())
}

fn conv_case() -> impl Strategy<Value = (ConvSpec, Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (
        1usize..4,
        1usize..4,
        any::<bool>(),
        (1usize..4, 1usize..4),
        (1usize..3, 1usize..3),
        (0usize..3, 0usize..3),
        (1usize..3, 1usize..3),
        (4usize..9, 4usize..9),
        1usize..3,
    )
        .prop_filter_map(
            "output must be non-empty",
            |(cin, mult, depthwise, kernel, stride, padding, dilation, (h, w), n)| {
                let cout = if depthwise { cin * mult } else { mult + 1 };
                let spec = ConvSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel,
                    stride,
                    padding,
                    dilation,
                    depthwise,
                    has_bias: false,
                };
                spec.output_size(h, w).ok().map(|hw| (spec, n, h, w, hw))
            },
        )
        .prop_flat_map(|(spec, n, h, w, (oh, ow))| {
            (
                Just(spec),
                tensor_f64([n, spec.in_channels, h, w]),
                tensor_f64(spec.weight_dims()),
                tensor_f64([n, spec.out_channels, oh, ow]),
            )
        })
}

/// Direct evaluation of the cross-correlation definition.
fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, spec: &ConvSpec, oh: usize, ow: usize) -> Tensor<f64> {
    let groups = spec.groups();
    let in_pg = spec.in_channels / groups;
    let out_pg = spec.out_channels / groups;
    Tensor::from_fn([x.n(), spec.out_channels, oh, ow], |[n, o, y, xx]| {
        let g = o / out_pg;
        let mut acc = 0.0;
        for i in 0..in_pg {
            for ky in 0..spec.kernel.0 {
                for kx in 0..spec.kernel.1 {
                    let iy = (y * spec.stride.0 + ky * spec.dilation.0) as isize - spec.padding.0 as isize;
                    let ix = (xx * spec.stride.1 + kx * spec.dilation.1) as isize - spec.padding.1 as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                        acc += wt.at([o, i, ky, kx]) * x.at([n, g * in_pg + i, iy as usize, ix as usize]);
                    }
                }
            }
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_definition_and_its_adjoint((spec, x, w, g) in conv_case()) {
        let y = conv2d(&x, &w, None, &spec).unwrap();
        let want = naive_conv(&x, &w, &spec, g.h(), g.w());
        prop_assert!(y.max_abs_diff(&want) < 1e-12);

        let grads = conv2d_backward(&x, &w, None, &spec, &g).unwrap();
        // <conv(x, w), g> is bilinear, so both adjoints must reproduce it.
        let lhs = y.dot(&g);
        prop_assert!((lhs - x.dot(&grads.input)).abs() < 1e-9 * (1.0 + lhs.abs()));
        prop_assert!((lhs - w.dot(&grads.weights)).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn conv_flops_formula_is_homogeneous((spec, _x, _w, g) in conv_case()) {
        let base = conv_flops(&spec, (g.h(), g.w()));
        prop_assert_eq!(conv_flops(&spec, (2 * g.h(), 2 * g.w())), 4 * base);
    }

    #[test]
    fn resize_adjoint(
        (x, oh, ow) in (1usize..3, 1usize..8, 1usize..8, 1usize..12, 1usize..12)
            .prop_flat_map(|(c, h, w, oh, ow)| (tensor_f64([1, c, h, w]), Just(oh), Just(ow))),
        seed in any::<u64>(),
    ) {
        let y = bicubic_resize(&x, oh, ow).unwrap();
        let mut state = seed;
        let g = Tensor::from_fn(y.dims(), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let back = bicubic_resize_backward(x.dims(), &g).unwrap();
        let lhs = y.dot(&g);
        prop_assert!((lhs - x.dot(&back)).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn resize_preserves_constants(c in -5.0..5.0f64, h in 1usize..10, w in 1usize..10, oh in 1usize..30, ow in 1usize..30) {
        let y = bicubic_resize(&Tensor::full([1, 1, h, w], c), oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn density_mass_and_permutation_invariance(
        pts in prop::collection::vec((0.0..48.0f64, 0.0..32.0f64), 0..60),
        rotate in 0usize..60,
    ) {
        let points: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let ann = SceneAnnotation { width: 48, height: 32, points: points.clone() };
        let map = generate_density_map(&ann, &GtParams::default()).unwrap();
        let n = points.len() as f64;
        prop_assert!((map.sum_f64() - n).abs() <= 1e-4 * n.max(1.0));
        let mut permuted = points;
        if !permuted.is_empty() {
            let k = rotate % permuted.len();
            permuted.rotate_left(k);
        }
        let again = generate_density_map(&SceneAnnotation { points: permuted, ..ann }, &GtParams::default()).unwrap();
        prop_assert_eq!(map, again);
    }

    #[test]
    fn pool_preserves_sums(t in tensor_f64([2, 2, 12, 8]), f in prop::sample::select(vec![(1usize, 1usize), (2, 2), (3, 4), (6, 8), (12, 1)])) {
        let p = pool_to(&t, 12 / f.0, 8 / f.1).unwrap();
        for (a, b) in p.item_sums().iter().zip(t.item_sums()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_survivors_are_the_largest(v in prop::collection::vec(-3.0..3.0f32, 1..80), fraction in 0.0..0.99f64) {
        let n = v.len();
        let mut p = Params::new();
        p.insert("c.weight", Tensor::new([1, 1, 1, n], v.clone()).unwrap());
        let (q, mask) = prune(&p, Criterion::L1Unstructured, fraction).unwrap();
        let k = l1_prune_count(fraction, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(a.cmp(&b)));
        let pruned: std::collections::BTreeSet<usize> = order[..k].iter().copied().collect();
        let m = mask.get("c.weight").unwrap();
        for (i, &vi) in v.iter().enumerate() {
            prop_assert_eq!(m.data()[i] == 0.0, pruned.contains(&i));
            let want = if pruned.contains(&i) { 0.0 } else { vi };
            prop_assert_eq!(q.get("c.weight").unwrap().data()[i], want);
        }
        let report = sparsity_report(&mask);
        let direct = m.data().iter().filter(|&&x| x == 0.0).count();
        prop_assert_eq!(report.zeros, direct);
        prop_assert_eq!(report.global, direct as f64 / n as f64);
    }

    #[test]
    fn mae_never_exceeds_rmse(pairs in prop::collection::vec((0.0..1e4f64, 0.0..1e4f64), 1..40)) {
        let r = count_metrics(&pairs).unwrap();
        prop_assert!(r.mae <= r.mse);
        prop_assert_eq!(r.n_images, pairs.len());
    }

    #[test]
    fn asft_roundtrip(t in (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| tensor_f64([n, c, h, w]))) {
        let t: Tensor = t.cast();
        let bytes = format::asft_bytes(&t);
        let back = format::decode_asft(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        for cut in 0..bytes.len() {
            prop_assert!(format::decode_asft(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = format::decode_asft(&bytes);
        let _ = format::decode_checkpoint(&bytes);
        let _ = format::decode_pgm(&bytes);
        let _ = format::decode_image(&bytes);
        let _ = format::decode_annotation(&bytes);
        let _ = asfnet::Config::from_json(&bytes);
    }

    #[test]
    fn concat_then_slice(a in tensor_f64([1, 2, 3, 3]), b in tensor_f64([1, 3, 3, 3])) {
        let c = concat_channels(&a, &b).unwrap();
        prop_assert_eq!(slice_channels(&c, 0, 2).unwrap(), a);
        prop_assert_eq!(slice_channels(&c, 2, 5).unwrap(), b);
    }
}

#[test]
fn cost_totals_ignore_row_order() {
    let report = count_cost(&NetworkConfig::default(), [3, 64, 64]).unwrap();
    let mut rows = report.layers.clone();
    rows.reverse();
    assert_eq!(rows.iter().map(|l| l.flops).sum::<u64>(), report.total_flops);
    assert_eq!(rows.iter().map(|l| l.params).sum::<u64>(), report.total_params);
}

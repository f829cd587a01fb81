mod common;

use common::{dense_equivalent, dense_psroi, rand_conv, rand_tensor, random_factorized, rng};
use hoi_core::attention::{self, AttentionWeights};
use hoi_core::context::{self, ContextAggWeights, RoiGrid};
use hoi_core::features::BBox;
use hoi_core::tensor::ops::{self, ConvWeights};
use hoi_core::{HoiError, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn rank_one_branch_equals_dense_conv() {
    let mut r = rng(4);
    for k in [3, 5, 7] {
        let mut w = random_factorized(k, 4, 1, 3, &mut r);
        // Silence branch B so only one rank-1 kernel per (c, o) remains.
        w.b_horizontal = w.b_horizontal.zeros_like();
        w.b_vertical = w.b_vertical.zeros_like();
        let x = rand_tensor(&[8, 8, 4], &mut r);
        let got = context::context_aggregate(&x, &w).unwrap();
        let want = ops::conv2d(&x, &dense_equivalent(&w)).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "k = {k}");
    }
}

#[test]
fn identity_branches_double_the_input() {
    let mut w = ContextAggWeights::<f64>::zeros(3, 2, 2, 2).unwrap();
    for conv in [&mut w.a_vertical, &mut w.a_horizontal, &mut w.b_horizontal, &mut w.b_vertical] {
        // Center tap identity.
        let (kh, kw, _, _) = conv.shape();
        let center = (kh / 2) * kw + kw / 2;
        for c in 0..2 {
            conv.kernel.data_mut()[(center * 2 + c) * 2 + c] = 1.0;
        }
    }
    let x = rand_tensor(&[5, 4, 2], &mut rng(5));
    let y = context::context_aggregate(&x, &w).unwrap();
    assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)).unwrap() < 1e-15);
}

#[test]
fn context_validation_rejects_mismatched_branches() {
    let mut w = ContextAggWeights::<f32>::zeros(5, 3, 4, 2).unwrap();
    w.b_vertical = ConvWeights::zeros(3, 1, 4, 2).unwrap();
    assert!(w.validate().is_err());
}

#[test]
fn psroi_matches_oracle_at_same_sample_count() {
    let mut r = rng(6);
    for _ in 0..20 {
        let (g, e) = (r.gen_range(1..4), r.gen_range(1..3));
        let map = rand_tensor(&[9, 10, g * g * e], &mut r);
        let roi = BBox {
            x1: r.gen_range(-2.0..4.0),
            y1: r.gen_range(-2.0..4.0),
            x2: r.gen_range(6.0..12.0),
            y2: r.gen_range(5.0..11.0),
        };
        for s in [1, 2, 3] {
            let (got, _) = context::ps_roi_align(&map, &roi, RoiGrid { grid: g, samples: s }).unwrap();
            let want = dense_psroi(&map, &roi, g, s);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }
}

#[test]
fn psroi_constant_map_and_degenerate_box() {
    let map = Tensor::<f64>::full(vec![6, 6, 8], 0.75).unwrap();
    let grid = RoiGrid { grid: 2, samples: 2 };
    let (y, _) = context::ps_roi_align(&map, &BBox { x1: 0.3, y1: 1.0, x2: 5.0, y2: 4.2 }, grid).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    let tiny = BBox { x1: 2.0, y1: 2.0, x2: 2.5, y2: 2.5 };
    assert!(matches!(
        context::ps_roi_align(&map, &tiny, grid),
        Err(HoiError::DegenerateRoi { .. })
    ));
    let outside = BBox { x1: 10.0, y1: 10.0, x2: 14.0, y2: 14.0 };
    assert!(context::ps_roi_align(&map, &outside, grid).is_err());
}

#[test]
fn psroi_cell_locality_is_exact() {
    let mut r = rng(7);
    let (g, e) = (3, 2);
    let grid = RoiGrid { grid: g, samples: 2 };
    for _ in 0..20 {
        let map = rand_tensor(&[8, 8, g * g * e], &mut r);
        let roi = BBox { x1: 0.5, y1: 1.0, x2: 7.0, y2: 7.5 };
        let (base, _) = context::ps_roi_align(&map, &roi, grid).unwrap();
        let cell = r.gen_range(0..g * g);
        // Perturb every channel outside this cell's group.
        let mut other = map.clone();
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            if (i % (g * g * e)) / e != cell {
                *v += r.gen_range(-5.0..5.0);
            }
        }
        let (y, _) = context::ps_roi_align(&other, &roi, grid).unwrap();
        assert_eq!(&y.data()[cell * e..(cell + 1) * e], &base.data()[cell * e..(cell + 1) * e]);
    }
}

#[test]
fn psroi_ignores_pixels_away_from_the_box() {
    let mut r = rng(8);
    let grid = RoiGrid { grid: 2, samples: 2 };
    let map = rand_tensor(&[12, 12, 4], &mut r);
    let roi = BBox { x1: 1.0, y1: 1.0, x2: 5.0, y2: 5.0 };
    let (base, _) = context::ps_roi_align(&map, &roi, grid).unwrap();
    let mut other = map.clone();
    for y in 0..12 {
        for x in 0..12 {
            if y >= 6 || x >= 6 {
                for c in 0..4 {
                    other.data_mut()[(y * 12 + x) * 4 + c] = 100.0;
                }
            }
        }
    }
    let (y, _) = context::ps_roi_align(&other, &roi, grid).unwrap();
    assert_eq!(y.data(), base.data());
}

fn shift(map: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let [h, w, c] = map.dims().try_into().unwrap();
    Tensor::from_fn(vec![h + dy, w + dx, c], |i| {
        let (y, x, ch) = (i / ((w + dx) * c), (i / c) % (w + dx), i % c);
        if y >= dy && x >= dx { map.data()[((y - dy) * w + x - dx) * c + ch] } else { 0.0 }
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factorized_matches_dense_for_sums_of_rank_one(seed in 0u64..10_000, ki in 0usize..3, cm in 1usize..3) {
        let k = [3, 5, 7][ki];
        let mut r = rng(seed);
        let w = random_factorized(k, 3, cm, 2, &mut r);
        let x = rand_tensor(&[8, 8, 3], &mut r);
        let got = context::context_aggregate(&x, &w).unwrap();
        let want = ops::conv2d(&x, &dense_equivalent(&w)).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn psroi_is_translation_equivariant(seed in 0u64..10_000, dy in 0usize..4, dx in 0usize..4) {
        let mut r = rng(seed);
        let grid = RoiGrid { grid: 2, samples: 2 };
        let map = rand_tensor(&[10, 10, 8], &mut r);
        let roi = BBox {
            x1: r.gen_range(1.0..3.0),
            y1: r.gen_range(1.0..3.0),
            x2: r.gen_range(5.0..9.0),
            y2: r.gen_range(5.0..9.0),
        };
        let moved = BBox { x1: roi.x1 + dx as f64, y1: roi.y1 + dy as f64, x2: roi.x2 + dx as f64, y2: roi.y2 + dy as f64 };
        let (a, _) = context::ps_roi_align(&map, &roi, grid).unwrap();
        let (b, _) = context::ps_roi_align(&shift(&map, dy, dx), &moved, grid).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn attention_maps_are_distributions(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let d = 8;
        let f_app = rand_tensor(&[d], &mut r).map(|v| v * 3.0);
        let a = rand_tensor(&[h, w, d], &mut r);
        let (attn, f_m) = attention::modulate(&f_app, &a).unwrap();
        prop_assert!((attn.sum() - 1.0).abs() < 1e-12);
        let heat = rand_conv(1, 1, d, 1, &mut r);
        let (h_norm, _) = attention::spatial_refine(&f_m, &heat).unwrap();
        prop_assert!((h_norm.sum() - 1.0).abs() < 1e-12);
        let (c_att, _) = attention::channel_refine(&f_m, &rand_conv(1, 1, d, 2, &mut r), &rand_conv(1, 1, 2, d, &mut r)).unwrap();
        prop_assert!(c_att.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn constant_projection_gives_uniform_attention() {
    let a = Tensor::<f64>::full(vec![3, 4, 5], 0.3).unwrap();
    let f_app = rand_tensor(&[5], &mut rng(9));
    let (attn, f_m) = attention::modulate(&f_app, &a).unwrap();
    assert!(attn.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    assert!(f_m.data().iter().all(|&v| (v - 0.3 / 12.0).abs() < 1e-15));
}

#[test]
fn zero_appearance_gives_uniform_attention() {
    let a = rand_tensor(&[2, 5, 4], &mut rng(10));
    let (attn, _) = attention::modulate(&Tensor::zeros(vec![4]).unwrap(), &a).unwrap();
    assert!(attn.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
}

#[test]
fn zero_se_weights_gate_at_one_half() {
    let f_m = rand_tensor(&[3, 3, 8], &mut rng(11));
    let w = AttentionWeights::<f64>::zeros(8, 4, 5, 2).unwrap();
    let (c_att, _) = attention::channel_refine(&f_m, &w.se_reduce, &w.se_expand).unwrap();
    assert!(c_att.data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_head_scores_one_half() {
    let w = AttentionWeights::<f64>::zeros(6, 2, 4, 3).unwrap();
    let f = rand_tensor(&[6], &mut rng(12));
    let (s, _) = attention::action_head(&f, &f, &w).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5, 0.5]);
}

#[test]
fn appearance_dimension_mismatch_is_shape_error() {
    let a = Tensor::<f64>::zeros(vec![2, 2, 4]).unwrap();
    let f = Tensor::<f64>::zeros(vec![3]).unwrap();
    assert!(matches!(attention::modulate(&f, &a), Err(HoiError::Shape { .. })));
}

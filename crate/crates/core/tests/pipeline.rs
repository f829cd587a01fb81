mod common;

use common::{random_detections, rng, tiny_config};
use hoi_core::features::{filter_detections, BBox, ImageFeatures, InstanceKind};
use hoi_core::model::ModelWeights;
use hoi_core::pipeline::{self, HoiTriplet};
use hoi_core::{par, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64) -> (ImageFeatures<f32>, ModelWeights<f32>) {
    let cfg = tiny_config();
    let mut r = rng(seed);
    let w = ModelWeights::<f32>::init(&cfg, &mut r).unwrap();
    let map = Tensor::<f32>::from_fn(vec![8, 8, cfg.input_channels], |_| r.gen_range(0.0..1.0)).unwrap();
    (ImageFeatures::new(map, 64, 64, 8).unwrap(), w)
}

#[test]
fn triplet_count_matches_formula() {
    let cfg = tiny_config();
    let (feats, w) = setup(1);
    let paired = cfg.paired_slots().count();
    let agent = cfg.agent_only_slots().count();
    let mut r = rng(2);
    for _ in 0..25 {
        let (n_h, n_o) = (r.gen_range(0..4), r.gen_range(0..5));
        let dets = random_detections(&mut r, n_h, n_o, 64.0);
        let kept = filter_detections(&dets, cfg.human_thresh, cfg.object_thresh).unwrap();
        let n_h = kept.iter().filter(|d| d.kind == InstanceKind::Human).count();
        let n_o = kept.len() - n_h;
        let t = pipeline::detect("x", &feats, &kept, &w, &cfg).unwrap();
        assert_eq!(t.len(), n_h * (n_o * paired + agent));
        assert!(t.iter().all(|x| (0.0..=1.0).contains(&x.score)));
    }
}

#[test]
fn no_humans_means_no_triplets() {
    let cfg = tiny_config();
    let (feats, w) = setup(3);
    let objects = random_detections(&mut rng(4), 0, 3, 64.0);
    assert!(pipeline::detect("x", &feats, &objects, &w, &cfg).unwrap().is_empty());
}

#[test]
fn permuting_objects_permutes_triplets() {
    let cfg = tiny_config();
    let (feats, w) = setup(5);
    let mut dets = random_detections(&mut rng(6), 2, 3, 64.0);
    let a = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap();
    dets.swap(2, 4);
    let b = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap();
    let key = |t: &HoiTriplet| {
        (
            t.human_box.as_array().map(f64::to_bits),
            t.object_box.map(|o| o.as_array().map(f64::to_bits)),
            t.action_id,
            t.role_id,
            t.score.to_bits(),
        )
    };
    let mut ka: Vec<_> = a.iter().map(key).collect();
    let mut kb: Vec<_> = b.iter().map(key).collect();
    assert_ne!(ka, kb);
    ka.sort();
    kb.sort();
    assert_eq!(ka, kb);
}

#[test]
fn agent_only_slots_have_no_object() {
    let cfg = tiny_config();
    let (feats, w) = setup(7);
    let dets = random_detections(&mut rng(8), 1, 2, 64.0);
    for t in pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap() {
        assert_eq!(t.object_box.is_none(), t.role_id == hoi_core::model::ROLE_AGENT_ONLY);
    }
}

#[test]
fn detect_is_identical_sequential_and_parallel() {
    let cfg = tiny_config();
    let (feats, w) = setup(9);
    let dets = random_detections(&mut rng(10), 3, 4, 64.0);
    let a = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap();
    let b = par::sequential(|| pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap());
    let c = par::with_jobs(3, || pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn detector_confidence_does_not_change_scores() {
    let cfg = tiny_config();
    let (feats, w) = setup(11);
    let mut dets = random_detections(&mut rng(12), 1, 2, 64.0);
    let a = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap();
    dets.iter_mut().for_each(|d| d.score = 1.0);
    let b = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn nan_features_are_a_numeric_error() {
    let cfg = tiny_config();
    let (mut feats, w) = setup(13);
    feats.feature_map.data_mut()[0] = f32::NAN;
    let dets = random_detections(&mut rng(14), 1, 1, 64.0);
    let err = pipeline::detect("x", &feats, &dets, &w, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn pattern_marks_box_cells() {
    let h = BBox { x1: 0.0, y1: 0.0, x2: 32.0, y2: 64.0 };
    let o = BBox { x1: 32.0, y1: 0.0, x2: 64.0, y2: 64.0 };
    let p = pipeline::interaction_pattern::<f32>(&h, &o);
    assert_eq!(p.dims(), &[64, 64, 2]);
    let ch0: f32 = p.data().iter().step_by(2).sum();
    let ch1: f32 = p.data().iter().skip(1).step_by(2).sum();
    assert_eq!((ch0, ch1), (2048.0, 2048.0));
    // Left half is human, right half object.
    assert_eq!(p.data()[0], 1.0);
    assert_eq!(p.data()[63 * 2 + 1], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fuse_follows_add_then_multiply(h in 0.0f64..1.0, o in 0.0f64..1.0, p in 0.0f64..1.0) {
        let t = |v: f64| Tensor::<f64>::new(vec![1], vec![v]).unwrap();
        let f = pipeline::fuse(&t(h), &t(o), &t(p)).unwrap().data()[0];
        prop_assert!((f - (h + o) / 2.0 * p).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn pattern_is_binary_and_covers_both_boxes(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let d = random_detections(&mut r, 1, 1, 100.0);
        let p = pipeline::interaction_pattern::<f64>(&d[0].bbox, &d[1].bbox);
        prop_assert!(p.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(p.data().iter().step_by(2).any(|&v| v == 1.0));
        prop_assert!(p.data().iter().skip(1).step_by(2).any(|&v| v == 1.0));
    }
}

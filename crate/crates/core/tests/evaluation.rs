mod common;

use common::{categories_of, eval_fixture, jitter, oracle_map, rng};
use hoi_core::evaluation::{
    self, average_precision, evaluate, feasible, iou, Category, EvalConfig, EvalMode, GroundTruthTriplet,
};
use hoi_core::features::BBox;
use hoi_core::pipeline::HoiTriplet;
use proptest::prelude::*;
use rand::Rng;

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox { x1, y1, x2, y2 }
}

fn gt(img: &str, h: BBox, o: Option<BBox>, a: u32, r: u32) -> GroundTruthTriplet {
    GroundTruthTriplet { image_id: img.into(), human_box: h, object_box: o, action_id: a, role_id: r, object_class: None }
}

fn det(img: &str, h: BBox, o: Option<BBox>, a: u32, r: u32, score: f64) -> HoiTriplet {
    HoiTriplet { image_id: img.into(), human_box: h, object_box: o, action_id: a, role_id: r, score }
}

fn cfg(t: f64) -> EvalConfig {
    EvalConfig { iou_threshold: t, mode: EvalMode::Default }
}

#[test]
fn fixture_matches_scripted_oracle() {
    for seed in 0..5 {
        let (dets, gts) = eval_fixture(seed);
        for t in [0.1, 0.3, 0.5, 0.7] {
            let r = evaluate(&dets, &gts, &categories_of(&gts), &cfg(t)).unwrap();
            let (want, per) = oracle_map(&dets, &gts, t);
            assert!((r.map - want).abs() < 1e-9, "seed {seed} t {t}: {} vs {want}", r.map);
            if t == 0.5 {
                assert!(r.map > 0.05 && r.map < 0.95, "fixture too easy or too hard: {}", r.map);
            }
            for (c, (a, ro, ap)) in r.per_category.iter().zip(per) {
                assert_eq!((c.action_id, c.role_id), (a, ro));
                assert!((c.ap.unwrap() - ap.unwrap()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tp_fp_tp_hand_case() {
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn perfect_detections_give_map_one() {
    let (_, gts) = eval_fixture(3);
    let dets: Vec<HoiTriplet> = gts
        .iter()
        .map(|g| det(&g.image_id, g.human_box, g.object_box, g.action_id, g.role_id, 1.0))
        .collect();
    let r = evaluate(&dets, &gts, &categories_of(&gts), &cfg(0.5)).unwrap();
    assert_eq!(r.map, 1.0);
}

#[test]
fn empty_detections_give_zero() {
    let (_, gts) = eval_fixture(4);
    let r = evaluate(&[], &gts, &categories_of(&gts), &cfg(0.5)).unwrap();
    assert_eq!(r.map, 0.0);
    assert!(r.per_category.iter().all(|c| c.ap == Some(0.0)));
}

#[test]
fn categories_without_ground_truth_are_excluded() {
    let h = bb(0.0, 0.0, 10.0, 10.0);
    let o = bb(20.0, 0.0, 30.0, 10.0);
    let gts = vec![gt("a", h, Some(o), 0, 0)];
    let cats = vec![
        Category { action_id: 0, role_id: 0, name: "hit".into(), object_class: None },
        Category { action_id: 1, role_id: 0, name: "kick".into(), object_class: None },
    ];
    let dets = vec![det("a", h, Some(o), 0, 0, 0.9), det("a", h, Some(o), 1, 0, 0.8)];
    let r = evaluate(&dets, &gts, &cats, &cfg(0.5)).unwrap();
    assert_eq!(r.per_category[1].ap, None);
    assert_eq!(r.map, 1.0);
}

#[test]
fn duplicate_detection_is_false_positive() {
    let h = bb(0.0, 0.0, 10.0, 10.0);
    let o = bb(20.0, 0.0, 30.0, 10.0);
    let gts = vec![gt("a", h, Some(o), 0, 0)];
    let dets = vec![det("a", h, Some(o), 0, 0, 0.9), det("a", h, Some(o), 0, 0, 0.8)];
    let r = evaluate(&dets, &gts, &categories_of(&gts), &cfg(0.5)).unwrap();
    assert_eq!((r.per_category[0].tp, r.per_category[0].fp), (1, 1));
    assert_eq!(r.map, 1.0);
}

#[test]
fn overlap_must_strictly_exceed_threshold() {
    // Human IoU exactly 0.5: [0,10]x[0,10] vs [0,10]x[0,5] has IoU 50/100.
    let g = gt("a", bb(0.0, 0.0, 10.0, 10.0), None, 0, 2);
    let d = det("a", bb(0.0, 0.0, 10.0, 5.0), None, 0, 2, 1.0);
    assert!(!feasible(&d, &g, 0.5));
    assert!(feasible(&d, &g, 0.49));
}

#[test]
fn object_box_mismatch_is_never_feasible() {
    let h = bb(0.0, 0.0, 10.0, 10.0);
    let g = gt("a", h, None, 0, 0);
    let d = det("a", h, Some(bb(0.0, 0.0, 5.0, 5.0)), 0, 0, 1.0);
    assert!(!feasible(&d, &g, 0.0));
}

#[test]
fn greedy_prefers_highest_overlap_then_lowest_index() {
    let o = bb(50.0, 50.0, 60.0, 60.0);
    let g0 = gt("a", bb(0.0, 0.0, 10.0, 10.0), Some(o), 0, 0);
    let g1 = gt("a", bb(1.0, 0.0, 11.0, 10.0), Some(o), 0, 0);
    // Identical to g1: should take g1 though g0 is also feasible.
    let d = det("a", bb(1.0, 0.0, 11.0, 10.0), Some(o), 0, 0, 0.9);
    let m = evaluation::match_image(&[d.clone()], &[g0.clone(), g1.clone()], &cfg(0.5)).unwrap();
    assert_eq!(m, vec![true]);
    // A second detection identical to g0 then still finds g0 free.
    let d2 = det("a", bb(0.0, 0.0, 10.0, 10.0), Some(o), 0, 0, 0.8);
    let m = evaluation::match_image(&[d, d2], &[g0, g1], &cfg(0.5)).unwrap();
    assert_eq!(m, vec![true, true]);
}

#[test]
fn known_object_mode_skips_images_without_the_class() {
    let h = bb(0.0, 0.0, 10.0, 10.0);
    let o = bb(20.0, 0.0, 30.0, 10.0);
    let mut g = gt("a", h, Some(o), 0, 0);
    g.object_class = Some(7);
    let gts = vec![g];
    let cats = vec![Category { action_id: 0, role_id: 0, name: "c".into(), object_class: Some(7) }];
    // A high-scoring FP in image "b", which contains no object of class 7.
    let dets = vec![det("b", h, Some(o), 0, 0, 0.95), det("a", h, Some(o), 0, 0, 0.5)];
    let default = evaluate(&dets, &gts, &cats, &cfg(0.5)).unwrap();
    let known = evaluate(&dets, &gts, &cats, &EvalConfig { iou_threshold: 0.5, mode: EvalMode::KnownObject }).unwrap();
    assert!((default.map - 0.5).abs() < 1e-12);
    assert_eq!(known.map, 1.0);
}

#[test]
fn duplicate_ground_truth_is_rejected() {
    let g = gt("a", bb(0.0, 0.0, 10.0, 10.0), None, 0, 2);
    assert!(evaluate(&[], &[g.clone(), g], &[], &cfg(0.5)).is_err());
}

#[test]
fn sweep_runs_at_standard_thresholds() {
    let (dets, gts) = eval_fixture(1);
    let pts = evaluation::threshold_sweep(&dets, &gts, &categories_of(&gts), &evaluation::SWEEP_THRESHOLDS, EvalMode::Default).unwrap();
    assert_eq!(pts.iter().map(|p| p.threshold).collect::<Vec<_>>(), vec![0.1, 0.3, 0.5, 0.7, 0.9]);
    assert!(pts.windows(2).all(|w| w[0].map >= w[1].map));
}

#[test]
fn invalid_threshold_rejected() {
    assert!(evaluate(&[], &[], &[], &cfg(1.5)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let b = bb(r.gen_range(0.0..50.0), r.gen_range(0.0..50.0), r.gen_range(51.0..100.0), r.gen_range(51.0..100.0));
        let c = jitter(&b, 30.0, &mut r);
        let (x, y) = (iou(&b, &c), iou(&c, &b));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn ap_invariant_under_monotone_rescoring(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let n = r.gen_range(1..20);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (r.gen_range(0.0..1.0), r.gen_bool(0.5))).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + r.gen_range(0..3);
        prop_assume!(n_gt > 0);
        let a = average_precision(&scored, n_gt);
        let b = average_precision(&scored.iter().map(|&(s, t)| (s.powi(3) * 10.0 - 4.0, t)).collect::<Vec<_>>(), n_gt);
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn feasibility_is_monotone_in_threshold(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let h = bb(10.0, 10.0, 50.0, 60.0);
        let o = bb(40.0, 30.0, 90.0, 70.0);
        let g = gt("a", h, Some(o), 0, 0);
        let d = det("a", jitter(&h, 15.0, &mut r), Some(jitter(&o, 15.0, &mut r)), 0, 0, 0.5);
        let (t1, t2) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(!feasible(&d, &g, hi) || feasible(&d, &g, lo));
    }
}

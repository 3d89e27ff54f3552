//! AP engine and matcher against independent oracles, plus protocol
//! properties on random fixtures.

mod common;

use common::*;
use mgnm::decoder::HoiPrediction;
use mgnm::evaluation::{
    average_precision, evaluate_hico, evaluate_vcoco, match_predictions, HicoSetting, HoiGroundTruth, ObjectRule,
    SplitRegistry, VcocoScenario, MATCH_IOU,
};
use mgnm::geometry::BBox;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn ap_matches_brute_force_on_random_fixtures() {
    let mut r = rng(42);
    for _ in 0..100 {
        let n = r.gen_range(0..=50);
        let flags: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let tps = flags.iter().filter(|&&f| f).count();
        let num_gt = tps + r.gen_range(0..5);
        let got = average_precision(&flags, num_gt);
        let want = brute_force_ap(&flags, num_gt);
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9, "{flags:?} / {num_gt}: {g} vs {w}"),
            (g, w) => assert_eq!(g, w),
        }
    }
}

fn b(x: f64, y: f64) -> BBox {
    bbox(x, y, x + 10.0, y + 10.0)
}

/// Crafted three-prediction / two-ground-truth cases.
fn crafted() -> Vec<(Vec<HoiPrediction>, Vec<(BBox, BBox)>)> {
    let g = vec![(b(0.0, 0.0), b(20.0, 0.0)), (b(1.5, 0.0), b(21.5, 0.0))];
    let p = |h: f64, o: f64, s: f64| prediction("img", b(h, 0.0), Some(b(o, 0.0)), 1, 0, s);
    vec![
        // exact hits on both, third a duplicate
        (vec![p(0.0, 20.0, 0.9), p(1.5, 21.5, 0.8), p(0.0, 20.0, 0.7)], g.clone()),
        // the best-scoring prediction sits between both gts
        (vec![p(0.8, 20.8, 0.9), p(0.0, 20.0, 0.8), p(1.5, 21.5, 0.7)], g.clone()),
        // a miss on the object, then two near hits
        (vec![p(0.0, 40.0, 0.9), p(1.0, 21.0, 0.8), p(0.2, 20.2, 0.6)], g.clone()),
        // equal scores, order decides
        (vec![p(1.5, 21.5, 0.5), p(0.0, 20.0, 0.5), p(0.7, 20.7, 0.5)], g.clone()),
        // all far away
        (vec![p(50.0, 70.0, 0.9), p(60.0, 80.0, 0.8), p(90.0, 20.0, 0.7)], g),
    ]
}

#[test]
fn matcher_matches_reference_and_exhaustive_assignment() {
    for (preds, gts) in crafted() {
        let gt_rows: Vec<HoiGroundTruth> = gts
            .iter()
            .map(|&(h, o)| HoiGroundTruth {
                image_key: "img".into(),
                human_box: h,
                object_box: Some(o),
                object_category: 1,
                action: 0,
            })
            .collect();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
        let sorted: Vec<&HoiPrediction> = order.iter().map(|&i| &preds[i]).collect();
        let refs: Vec<&HoiGroundTruth> = gt_rows.iter().collect();
        let got = match_predictions(&sorted, &refs, MATCH_IOU, ObjectRule::Required);

        let want = reference_match(&preds, &gts, MATCH_IOU);
        let want_sorted: Vec<bool> = order.iter().map(|&i| want[i]).collect();
        assert_eq!(got, want_sorted);
        let tps = got.iter().filter(|&&f| f).count();
        assert_eq!(tps, max_assignment(&preds, &gts, MATCH_IOU));
    }
}

/// Random predictions and ground truths over a few images, two categories
/// and two actions.
fn fixture(seed: u64, n_preds: usize) -> (Vec<HoiPrediction>, Vec<HoiGroundTruth>) {
    let mut r = rng(seed);
    let images = ["i0", "i1", "i2", "i3"];
    let mut gts = Vec::new();
    for img in images {
        for _ in 0..r.gen_range(0..4) {
            // 15 px apart: no prediction can clear 0.5 against two of them
            let g = HoiGroundTruth {
                image_key: img.into(),
                human_box: b(5.0 + r.gen_range(0..4) as f64 * 15.0, 5.0),
                object_box: Some(b(5.0 + r.gen_range(0..4) as f64 * 15.0, 35.0)),
                object_category: r.gen_range(1..=2),
                action: r.gen_range(0..2),
            };
            if !gts.contains(&g) {
                gts.push(g);
            }
        }
    }
    let mut preds = Vec::new();
    for _ in 0..n_preds {
        let (h, o, c, a, img) = if !gts.is_empty() && r.gen_bool(0.6) {
            let g = &gts[r.gen_range(0..gts.len())];
            let j = r.gen_range(-2.0..2.0);
            (
                g.human_box.translated(j, 0.0).unwrap(),
                g.object_box.unwrap().translated(0.0, j).unwrap(),
                if r.gen_bool(0.8) { g.object_category } else { 3 - g.object_category },
                if r.gen_bool(0.8) { g.action } else { 1 - g.action },
                g.image_key.clone(),
            )
        } else {
            (
                b(r.gen_range(0.0..50.0), 0.0),
                b(r.gen_range(0.0..50.0), 30.0),
                r.gen_range(1..=2),
                r.gen_range(0..2),
                images[r.gen_range(0..images.len())].to_string(),
            )
        };
        preds.push(prediction(&img, h, Some(o), c, a, r.gen_range(0.0..1.0)));
    }
    (preds, gts)
}

fn registry_and_splits() -> (mgnm::registry::Registry, SplitRegistry) {
    let reg = mgnm::registry::Registry::new(
        vec!["person".into(), "cup".into(), "ball".into()],
        vec!["hold".into(), "kick".into()],
        vec![(0, 1), (0, 2), (1, 1), (1, 2)],
    )
    .unwrap();
    let splits = SplitRegistry::from_counts(&reg, vec![3, 30, 12, 5]);
    (reg, splits)
}

fn reports(preds: &[HoiPrediction], gts: &[HoiGroundTruth]) -> [Option<f64>; 6] {
    let (reg, splits) = registry_and_splits();
    let d = evaluate_hico(preds, gts, &reg, &splits, HicoSetting::Default);
    let k = evaluate_hico(preds, gts, &reg, &splits, HicoSetting::KnownObject);
    [d.full, d.rare, d.non_rare, k.full, k.rare, k.non_rare]
}

fn close(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-12,
        (x, y) => x == y,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_score_maps_leave_map_unchanged(seed in 0u64..10_000, n in 0usize..40, k in 0.1f64..5.0) {
        let (preds, gts) = fixture(seed, n);
        let base = reports(&preds, &gts);
        let mapped: Vec<HoiPrediction> = preds
            .iter()
            .map(|p| HoiPrediction { score: (k * p.score).exp() + 3.0, ..p.clone() })
            .collect();
        prop_assert!(close(&base, &reports(&mapped, &gts)));
    }

    #[test]
    fn duplicates_never_raise_ap(seed in 0u64..10_000, n in 1usize..40, pick in 0usize..40) {
        let (mut preds, gts) = fixture(seed, n);
        let (reg, splits) = registry_and_splits();
        let before = evaluate_hico(&preds, &gts, &reg, &splits, HicoSetting::Default);
        preds.push(preds[pick % n].clone());
        let after = evaluate_hico(&preds, &gts, &reg, &splits, HicoSetting::Default);
        for (x, y) in before.classes.iter().zip(&after.classes) {
            if let (Some(a), Some(b)) = (x.ap, y.ap) {
                prop_assert!(b <= a + 1e-12, "class {} rose from {a} to {b}", x.class);
            }
        }
    }

    #[test]
    fn known_object_never_below_default(seed in 0u64..10_000, n in 0usize..40) {
        let (preds, gts) = fixture(seed, n);
        let [df, dr, dn, kf, kr, kn] = reports(&preds, &gts);
        for (d, k) in [(df, kf), (dr, kr), (dn, kn)] {
            if let (Some(d), Some(k)) = (d, k) {
                prop_assert!(k >= d - 1e-12);
            }
        }
    }

    #[test]
    fn scenarios_agree_without_occlusion(seed in 0u64..10_000, n in 0usize..40) {
        let (preds, gts) = fixture(seed, n);
        let s1 = evaluate_vcoco(&preds, &gts, 2, VcocoScenario::One);
        let s2 = evaluate_vcoco(&preds, &gts, 2, VcocoScenario::Two);
        prop_assert_eq!(s1.per_action, s2.per_action);
    }
}

//! Permuting detections permutes pair features and logits the same way.

mod common;

use common::*;
use mgnm::autograd::Tape;
use mgnm::geometry::{Detection, DetectionSet};
use mgnm::model::{build_store, forward, ForwardOptions, SceneInputs};
use mgnm::providers::appearance_key;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_scene(seed: u64) -> (Vec<Detection>, Vec<String>) {
    let mut r = rng(seed);
    let persons = r.gen_range(1..=3);
    let objects = r.gen_range(1..=4);
    let mut dets = Vec::new();
    for i in 0..persons + objects {
        let x = r.gen_range(0.0..200.0);
        let y = r.gen_range(0.0..150.0);
        dets.push(Detection {
            id: i,
            bbox: bbox(x, y, x + r.gen_range(10.0..100.0), y + r.gen_range(10.0..100.0)),
            category: if i < persons { 0 } else { r.gen_range(1..=2) },
            score: r.gen_range(0.5..1.0),
        });
    }
    let keys = (0..dets.len()).map(|i| appearance_key(&format!("perm-{seed}"), i)).collect();
    (dets, keys)
}

fn run(seed: u64, dets: Vec<Detection>, keys: &[String]) -> (SceneInputs, ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let registry = small_registry();
    let (cfg, providers) = small_model(8, seed);
    let store = build_store(&cfg, &registry, &providers, seed).unwrap();
    let set = DetectionSet {
        image_width: 320.0,
        image_height: 260.0,
        detections: dets,
    };
    let inputs = SceneInputs::from_detections(&format!("perm-{seed}"), set, keys, &cfg, &providers).unwrap();
    let mut t = Tape::new();
    let out = forward(&mut t, &store, &cfg, &inputs, ForwardOptions::default()).unwrap();
    let e = t.value(out.pair_features).clone();
    let l = t.value(out.logits).clone();
    drop(t);
    (inputs, e, l)
}

#[test]
fn permuted_detections_permute_rows() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (dets, keys) = random_scene(seed);
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        perm.shuffle(&mut rng(1000 + seed));
        // new position i holds old detection perm[i]
        let pdets: Vec<Detection> = perm
            .iter()
            .enumerate()
            .map(|(i, &old)| Detection { id: i, ..dets[old].clone() })
            .collect();
        let pkeys: Vec<String> = perm.iter().map(|&old| keys[old].clone()).collect();

        let (a, ea, la) = run(seed, dets, &keys);
        let (b, eb, lb) = run(seed, pdets, &pkeys);
        assert_eq!(a.num_pairs(), b.num_pairs());
        for (pb, &(hb, ob)) in b.table.pairs.iter().enumerate() {
            let orig = (perm[hb], perm[ob]);
            let pa = a.table.pairs.iter().position(|&p| p == orig).expect("same pair set");
            for (x, y) in ea.row(pa).iter().zip(eb.row(pb)) {
                worst = worst.max((x - y).abs());
            }
            for (x, y) in la.row(pa).iter().zip(lb.row(pb)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

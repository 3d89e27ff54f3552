//! Central finite-difference checks of every trainable path at 64-bit.

mod common;

use common::*;
use mgnm::autograd::Tape;
use mgnm::decoder::{self, DecoderConfig};
use mgnm::geometry::SPATIAL_DIM;
use mgnm::model::{forward, ForwardOptions, SceneInputs};
use mgnm::nn::{self, FusionConfig, ParameterStore};
use mgnm::providers::{apply_adapter, register_adapter, AdapterConfig};

const TOL: f64 = 1e-4;

/// Below this norm both gradients are finite-difference noise.
const ZERO_FLOOR: f64 = 1e-8;

fn assert_all_pass(checks: &[GradCheck]) {
    assert!(!checks.is_empty(), "no trainable tensor was reached");
    for g in checks {
        // softmax ignores a shift shared by all keys, so the key bias
        // gradient is exactly zero and its relative error is noise
        if g.name.contains(".attn.k.b") && g.numeric_norm < ZERO_FLOOR {
            assert!(g.analytic_norm < ZERO_FLOOR, "{}: analytic norm {:e}", g.name, g.analytic_norm);
            continue;
        }
        assert!(g.rel_err < TOL, "{}: relative error {:e}", g.name, g.rel_err);
    }
}

fn randomise(store: &mut ParameterStore, seed: u64) {
    // move gains and zero biases off their initial values so every path is
    // exercised away from degenerate points
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    for n in names {
        let v = store.value(&n).unwrap().clone();
        let noise = random_mat(&mut r, v.nrows(), v.ncols()) * 0.1;
        store.set_value(&n, v + noise).unwrap();
    }
}

#[test]
fn linear_and_layer_norm() {
    let mut s = ParameterStore::new(1);
    nn::register_linear(&mut s, "lin", 5, 4).unwrap();
    nn::register_layer_norm(&mut s, "ln", 4).unwrap();
    randomise(&mut s, 2);
    let mut r = rng(3);
    let x = random_mat(&mut r, 3, 5);
    let w = random_mat(&mut r, 3, 4);
    let errs = finite_difference_report(&s, |t: &mut Tape<'_>, s| {
        let xv = t.constant(x.clone());
        let y = nn::linear(t, s, "lin", xv).unwrap();
        let y = nn::layer_norm(t, s, "ln", y).unwrap();
        t.dot_const(y, w.clone()).unwrap()
    });
    assert_all_pass(&errs);
    assert_eq!(errs.len(), 4);
}

#[test]
fn mbf_and_mmf() {
    let mut s = ParameterStore::new(4);
    let cfg = FusionConfig {
        branches: 2,
        in_a: 3,
        in_b: 5,
        out_dim: 4,
    };
    nn::register_mbf(&mut s, "mbf", &cfg).unwrap();
    nn::register_mmf(&mut s, "mmf", 4, 6).unwrap();
    randomise(&mut s, 5);
    let mut r = rng(6);
    let a = random_mat(&mut r, 1, 3);
    let b = random_mat(&mut r, 4, 5);
    let sig = random_mat(&mut r, 4, 6);
    let w = random_mat(&mut r, 4, 4);
    let errs = finite_difference_report(&s, |t: &mut Tape<'_>, s| {
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let sv = t.constant(sig.clone());
        let f = nn::mbf(t, s, "mbf", av, bv).unwrap();
        let m = nn::mmf(t, s, "mmf", f, sv).unwrap();
        t.dot_const(m, w.clone()).unwrap()
    });
    assert_all_pass(&errs);
    assert_eq!(errs.len(), 5 + 10);
}

#[test]
fn cross_attention_and_decoder() {
    let mut s = ParameterStore::new(7);
    let cfg = DecoderConfig {
        layers: 2,
        heads: 2,
        ff_mult: 2,
    };
    decoder::register_decoder(&mut s, &cfg, 6, 5).unwrap();
    decoder::register_action_head(&mut s, 6, 3).unwrap();
    randomise(&mut s, 8);
    let mut r = rng(9);
    let q = random_mat(&mut r, 3, 6);
    let kv = random_mat(&mut r, 9, 5);
    let w = random_mat(&mut r, 3, 3);
    let errs = finite_difference_report(&s, |t: &mut Tape<'_>, s| {
        let qv = t.constant(q.clone());
        let kvv = t.constant(kv.clone());
        let d = decoder::decode(t, s, &cfg, qv, kvv).unwrap();
        let l = decoder::action_logits(t, s, d.output).unwrap();
        t.dot_const(l, w.clone()).unwrap()
    });
    assert_all_pass(&errs);
    assert_eq!(errs.len(), s.len());
}

#[test]
fn adapter_including_rho() {
    let mut s = ParameterStore::new(10);
    register_adapter(&mut s, "ad", 8, &AdapterConfig::default()).unwrap();
    randomise(&mut s, 11);
    let mut r = rng(12);
    let e = random_mat(&mut r, 3, 8);
    let w = random_mat(&mut r, 3, 8);
    let errs = finite_difference_report(&s, |t: &mut Tape<'_>, s| {
        let ev = t.constant(e.clone());
        let y = apply_adapter(t, s, "ad", ev).unwrap();
        t.dot_const(y, w.clone()).unwrap()
    });
    assert_all_pass(&errs);
    assert!(errs.iter().any(|g| g.name == "ad.rho"));
}

#[test]
fn focal_loss_logits() {
    let mut s = ParameterStore::new(13);
    s.register("logits", 4, 3, nn::Init::Uniform).unwrap();
    let mut r = rng(14);
    s.set_value("logits", random_mat(&mut r, 4, 3) * 4.0).unwrap();
    let targets = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
    for (alpha, gamma) in [(0.25, 2.0), (0.5, 0.0), (0.7, 1.5)] {
        let errs = finite_difference_report(&s, |t: &mut Tape<'_>, s| {
            let z = t.param(s, "logits").unwrap();
            t.focal_loss(z, &targets, alpha, gamma).unwrap()
        });
        assert_all_pass(&errs);
    }
}

/// The whole model on two persons and two objects: spatial init, adjacency,
/// visual, textual and interaction stages, decoder, head and focal loss.
#[test]
fn end_to_end_graph_stages() {
    let mut fx = two_by_two_fixture(8, 21);
    randomise(&mut fx.store, 22);
    let cfg = fx.cfg.clone();
    // the tape borrows constant inputs for its whole lifetime
    let scene: &'static SceneInputs = Box::leak(Box::new(fx.scene.inputs.clone()));
    let targets = fx.scene.targets.clone();
    let errs = finite_difference_report(&fx.store, |t: &mut Tape<'_>, s| {
        let out = forward(t, s, &cfg, scene, ForwardOptions::default()).unwrap();
        t.focal_loss(out.logits, &targets, 0.25, 2.0).unwrap()
    });
    assert_all_pass(&errs);
    let reached: Vec<&str> = errs.iter().map(|g| g.name.as_str()).collect();
    for block in ["mmf.", "mbf.wg.", "wg.linear.", "mbf.v.", "mbf.t.", "ln.inter.pair.", "ln.inter.text.", "proj.i.", "adapter."] {
        assert!(reached.iter().any(|n| n.starts_with(block)), "no gradient reached {block}");
    }
    let trainable = fx.store.iter().filter(|(_, p)| p.trainable).count();
    assert_eq!(errs.len(), trainable, "some trainable tensor is unreachable");
    assert_eq!(SPATIAL_DIM, fx.scene.inputs.table.spatial.ncols());
}

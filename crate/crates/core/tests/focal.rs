//! Focal-loss reductions, saturation and stability.

mod common;

use common::*;
use mgnm::training::focal_loss;
use ndarray::{array, Array2};
use rand::Rng;

fn bce(z: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn gamma_zero_half_alpha_is_half_bce() {
    let mut r = rng(1);
    for _ in 0..20 {
        let z = random_mat(&mut r, 4, 5) * 6.0;
        let t = Array2::from_shape_simple_fn((4, 5), || if r.gen_bool(0.3) { 1.0 } else { 0.0 });
        let mean_bce = z.iter().zip(&t).map(|(&z, &t)| bce(z, t)).sum::<f64>() / z.len() as f64;
        let got = focal_loss(&z, &t, 0.5, 0.0).unwrap();
        assert!((got - 0.5 * mean_bce).abs() < 1e-10, "{got} vs {}", 0.5 * mean_bce);
    }
}

#[test]
fn saturated_correct_logit_costs_nothing() {
    assert!(focal_loss(&array![[100.0]], &array![[1.0]], 0.25, 2.0).unwrap() < 1e-8);
    assert!(focal_loss(&array![[-100.0]], &array![[0.0]], 0.25, 2.0).unwrap() < 1e-8);
}

#[test]
fn random_fixture_matches_direct_formula() {
    let mut r = rng(2);
    let z = random_mat(&mut r, 2, 3) * 3.0;
    let t = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
    for (alpha, gamma) in [(0.25, 2.0), (0.5, 1.0), (0.9, 0.5)] {
        let want = z.iter().zip(&t).map(|(&z, &t)| focal_reference(z, t, alpha, gamma)).sum::<f64>() / 6.0;
        let got = focal_loss(&z, &t, alpha, gamma).unwrap();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn finite_across_the_logit_range() {
    let z = Array2::from_shape_fn((2, 201), |(_, j)| j as f64 - 100.0);
    for t in [Array2::zeros((2, 201)), Array2::ones((2, 201))] {
        let l = focal_loss(&z, &t, 0.25, 2.0).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
    // wrong and confident is expensive but finite
    let l = focal_loss(&array![[-100.0]], &array![[1.0]], 0.25, 2.0).unwrap();
    assert!(l.is_finite() && l > 20.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(focal_loss(&Array2::zeros((2, 3)), &Array2::zeros((3, 2)), 0.25, 2.0).is_err());
}

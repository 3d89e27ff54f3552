//! Learned building blocks shared by the graph and the decoder.
//!
//! Every block is a pair of functions: `register_*` adds its tensors to a
//! [`ParameterStore`], and the forward function records it on a [`Tape`].
//! Tensor names are `<block name>.<role>`.

pub mod checkpoint;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{shape_err, Error, Result};
pub use params::{Init, Parameter, ParameterStore};

pub fn register_linear(store: &mut ParameterStore, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    store.register(&format!("{name}.w"), d_in, d_out, Init::Uniform)?;
    store.register(&format!("{name}.b"), 1, d_out, Init::Zeros)
}

/// `x W + b`.
pub fn linear<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = t.param(store, &format!("{name}.w"))?;
    let b = t.param(store, &format!("{name}.b"))?;
    if t.shape(x).1 != t.shape(w).0 {
        return Err(shape_err(format!("linear {name}"), (t.shape(x).0, t.shape(w).0), t.shape(x)));
    }
    let xw = t.matmul(x, w)?;
    t.add_row(xw, b)
}

pub fn register_layer_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    store.register(&format!("{name}.gain"), 1, d, Init::Ones)?;
    store.register(&format!("{name}.bias"), 1, d, Init::Zeros)
}

pub fn layer_norm<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, name: &str, x: Var) -> Result<Var> {
    let gain = t.param(store, &format!("{name}.gain"))?;
    let bias = t.param(store, &format!("{name}.bias"))?;
    t.layer_norm(x, gain, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub branches: usize,
    pub in_a: usize,
    pub in_b: usize,
    pub out_dim: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.out_dim % self.branches != 0 {
            return Err(Error::InvalidConfig(format!(
                "fusion width {} not divisible by {} branches",
                self.out_dim, self.branches
            )));
        }
        Ok(())
    }
}

/// Multi-branch fusion. Branch `k` owns column block `k` of `u`, `v` and `c`:
///
/// `f_k = relu(a U_k) * relu(b V_k + c_k)`, `out = [f_1 .. f_B] W_out + b_out`.
pub fn register_mbf(store: &mut ParameterStore, name: &str, cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    store.register(&format!("{name}.u"), cfg.in_a, cfg.out_dim, Init::Uniform)?;
    store.register(&format!("{name}.v"), cfg.in_b, cfg.out_dim, Init::Uniform)?;
    store.register(&format!("{name}.c"), 1, cfg.out_dim, Init::Zeros)?;
    store.register(&format!("{name}.w_out"), cfg.out_dim, cfg.out_dim, Init::Uniform)?;
    store.register(&format!("{name}.b_out"), 1, cfg.out_dim, Init::Zeros)
}

/// `a` may be a single row, broadcast against every row of `b`.
pub fn mbf<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, name: &str, a: Var, b: Var) -> Result<Var> {
    let (ra, _) = t.shape(a);
    let (rb, _) = t.shape(b);
    if ra != rb && ra != 1 {
        return Err(shape_err(format!("mbf {name} rows"), (rb, t.shape(a).1), t.shape(a)));
    }
    let u = t.param(store, &format!("{name}.u"))?;
    let v = t.param(store, &format!("{name}.v"))?;
    let c = t.param(store, &format!("{name}.c"))?;
    let w_out = t.param(store, &format!("{name}.w_out"))?;
    let b_out = t.param(store, &format!("{name}.b_out"))?;

    let au = t.matmul(a, u)?;
    let mut fa = t.relu(au);
    if ra != rb {
        fa = t.broadcast_rows(fa, rb)?;
    }
    let bv = t.matmul(b, v)?;
    let bv = t.add_row(bv, c)?;
    let fb = t.relu(bv);
    let fused = t.mul(fa, fb)?;
    let out = t.matmul(fused, w_out)?;
    t.add_row(out, b_out)
}

/// Multimodality fusion of content `x` with a modulating signal `s`:
/// `LN(mlp_x(x) * sigmoid(mlp_s(s)) + x)`.
pub fn register_mmf(store: &mut ParameterStore, name: &str, d_x: usize, d_s: usize) -> Result<()> {
    register_linear(store, &format!("{name}.x1"), d_x, d_x)?;
    register_linear(store, &format!("{name}.x2"), d_x, d_x)?;
    register_linear(store, &format!("{name}.s1"), d_s, d_x)?;
    register_linear(store, &format!("{name}.s2"), d_x, d_x)?;
    register_layer_norm(store, &format!("{name}.ln"), d_x)
}

pub fn mmf<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, name: &str, x: Var, s: Var) -> Result<Var> {
    if t.shape(x).0 != t.shape(s).0 {
        return Err(shape_err(format!("mmf {name} rows"), t.shape(x), t.shape(s)));
    }
    let hx = linear(t, store, &format!("{name}.x1"), x)?;
    let hx = t.relu(hx);
    let hx = linear(t, store, &format!("{name}.x2"), hx)?;
    let hs = linear(t, store, &format!("{name}.s1"), s)?;
    let hs = t.relu(hs);
    let hs = linear(t, store, &format!("{name}.s2"), hs)?;
    let gate = t.sigmoid(hs);
    let modulated = t.mul(hx, gate)?;
    let res = t.add(modulated, x)?;
    layer_norm(t, store, &format!("{name}.ln"), res)
}

pub fn register_cross_attention(store: &mut ParameterStore, name: &str, d_q: usize, d_kv: usize) -> Result<()> {
    register_linear(store, &format!("{name}.q"), d_q, d_q)?;
    register_linear(store, &format!("{name}.k"), d_kv, d_q)?;
    register_linear(store, &format!("{name}.v"), d_kv, d_q)?;
    register_linear(store, &format!("{name}.o"), d_q, d_q)
}

/// Output of [`cross_attention`]: the projected result and the per-head
/// attention matrices (queries x keys, rows sum to one).
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Mat>,
}

/// Multi-head scaled dot-product attention of `q` rows over `kv` rows.
pub fn cross_attention<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    name: &str,
    q: Var,
    kv: Var,
    heads: usize,
) -> Result<Attention> {
    let d_q = t.shape(q).1;
    if heads == 0 || d_q % heads != 0 {
        return Err(Error::InvalidConfig(format!("{heads} heads do not divide width {d_q}")));
    }
    let qp = linear(t, store, &format!("{name}.q"), q)?;
    let kp = linear(t, store, &format!("{name}.k"), kv)?;
    let vp = linear(t, store, &format!("{name}.v"), kv)?;
    let dh = d_q / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(qp, lo, hi);
        let kh = t.slice_cols(kp, lo, hi);
        let kh_t = t.transpose(kh);
        let scores = t.matmul(qh, kh_t)?;
        let scores = t.scale(scores, scale);
        let attn = t.softmax_rows(scores);
        weights.push(t.value(attn).clone());
        let vh = t.slice_cols(vp, lo, hi);
        outs.push(t.matmul(attn, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)?
    };
    let output = linear(t, store, &format!("{name}.o"), merged)?;
    Ok(Attention { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn store_with<F: FnOnce(&mut ParameterStore)>(f: F) -> ParameterStore {
        let mut s = ParameterStore::new(11);
        f(&mut s);
        s
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut s = store_with(|s| register_linear(s, "l", 3, 3).unwrap());
        s.set_value("l.w", Array2::eye(3)).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = linear(&mut t, &s, "l", xv).unwrap();
        assert_eq!(t.value(y), &x);

        s.set_value("l.b", array![[0.1, 0.2, 0.3]]).unwrap();
        let mut t = Tape::new();
        let z = t.input(Array2::zeros((2, 3)));
        let y = linear(&mut t, &s, "l", z).unwrap();
        assert_eq!(t.value(y), &array![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let s = store_with(|s| register_linear(s, "l", 3, 2).unwrap());
        let mut t = Tape::new();
        let x = t.input(Array2::zeros((1, 4)));
        assert!(matches!(linear(&mut t, &s, "l", x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let s = store_with(|s| register_layer_norm(s, "ln", 4).unwrap());
        let mut t = Tape::new();
        let x = t.input(Array2::from_elem((1, 4), 3.0));
        let y = layer_norm(&mut t, &s, "ln", x).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));

        let s = store_with(|s| register_layer_norm(s, "ln", 2).unwrap());
        let mut t = Tape::new();
        let x = t.input(array![[1.0, -1.0]]);
        let y = layer_norm(&mut t, &s, "ln", x).unwrap();
        // var = 1, so the 1e-5 epsilon leaves a 5e-6 relative shrink.
        for (got, want) in t.value(y).iter().zip([1.0, -1.0]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn mbf_zero_a_yields_output_bias() {
        let cfg = FusionConfig {
            branches: 2,
            in_a: 3,
            in_b: 2,
            out_dim: 4,
        };
        let mut s = store_with(|s| register_mbf(s, "m", &cfg).unwrap());
        s.set_value("m.b_out", array![[1.0, 2.0, 3.0, 4.0]]).unwrap();
        s.set_value("m.c", array![[0.5, 0.5, 0.5, 0.5]]).unwrap();
        let mut t = Tape::new();
        let a = t.input(Array2::zeros((2, 3)));
        let b = t.input(array![[1.0, 2.0], [3.0, -1.0]]);
        let y = mbf(&mut t, &s, "m", a, b).unwrap();
        assert_eq!(t.value(y), &array![[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn mbf_single_branch_reduces_to_gated_product() {
        let cfg = FusionConfig {
            branches: 1,
            in_a: 2,
            in_b: 2,
            out_dim: 2,
        };
        let mut s = store_with(|s| register_mbf(s, "m", &cfg).unwrap());
        for n in ["m.u", "m.v", "m.w_out"] {
            s.set_value(n, Array2::eye(2)).unwrap();
        }
        let mut t = Tape::new();
        let a = t.input(array![[1.0, 1.0]]);
        let b = t.input(array![[1.0, 1.0], [1.0, 1.0]]);
        let y = mbf(&mut t, &s, "m", a, b).unwrap();
        assert_eq!(t.value(y), &array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn mbf_branch_count_must_divide_width() {
        let cfg = FusionConfig {
            branches: 3,
            in_a: 2,
            in_b: 2,
            out_dim: 4,
        };
        let mut s = ParameterStore::new(0);
        assert!(register_mbf(&mut s, "m", &cfg).is_err());
    }

    #[test]
    fn mmf_closed_gate_is_layer_norm_of_content() {
        let mut s = store_with(|s| register_mmf(s, "f", 4, 3).unwrap());
        s.set_value("f.s2.b", Array2::from_elem((1, 4), -1e4)).unwrap();
        let x = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let sv = t.input(array![[0.1, 0.2, 0.3], [0.0, -1.0, 2.0]]);
        let y = mmf(&mut t, &s, "f", xv, sv).unwrap();
        let y = t.value(y).clone();
        let mut t2 = Tape::new();
        let xv = t2.input(x);
        let want = layer_norm(&mut t2, &s, "f.ln", xv).unwrap();
        assert_eq!(&y, t2.value(want));
    }

    #[test]
    fn mmf_zero_content_gives_ln_bias() {
        let mut s = store_with(|s| register_mmf(s, "f", 3, 2).unwrap());
        s.set_value("f.ln.bias", array![[0.5, -0.5, 2.0]]).unwrap();
        let mut t = Tape::new();
        let xv = t.input(Array2::zeros((2, 3)));
        let sv = t.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = mmf(&mut t, &s, "f", xv, sv).unwrap();
        assert_eq!(t.value(y), &array![[0.5, -0.5, 2.0], [0.5, -0.5, 2.0]]);
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let s = store_with(|s| register_cross_attention(s, "a", 4, 3).unwrap());
        let mut t = Tape::new();
        let q = t.input(array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 0.0]]);
        let kv = t.input(array![[0.3, -0.2, 0.9]]);
        let att = cross_attention(&mut t, &s, "a", q, kv, 2).unwrap();
        for w in &att.weights {
            assert!(w.iter().all(|&v| v == 1.0));
        }

        let mut t = Tape::new();
        let q = t.input(array![[0.1, 0.2, 0.3, 0.4]]);
        let kv = t.input(array![[0.3, -0.2, 0.9], [0.3, -0.2, 0.9]]);
        let att = cross_attention(&mut t, &s, "a", q, kv, 4).unwrap();
        for w in &att.weights {
            assert_eq!(w, &array![[0.5, 0.5]]);
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let s = store_with(|s| register_cross_attention(s, "a", 4, 3).unwrap());
        let mut t = Tape::new();
        let q = t.input(Array2::zeros((1, 4)));
        let kv = t.input(Array2::zeros((2, 3)));
        assert!(cross_attention(&mut t, &s, "a", q, kv, 3).is_err());
    }
}

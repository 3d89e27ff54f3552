//! Named trainable tensors with gradient slots.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Gradients, Mat};
use crate::error::{Error, Result};
use crate::hashing::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` = rows.
    Uniform,
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Mat,
    pub grad: Mat,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a trainable tensor. The initial value depends only on
    /// `(seed, name, shape, init)`.
    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Constant(c) => Array2::from_elem((rows, cols), c),
            Init::Uniform => {
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                let mut rng = keyed_rng(self.seed, "param", &format!("{name}:{rows}x{cols}"));
                Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
            }
        };
        self.insert(name, value, true)
    }

    /// Registers a tensor the optimizer never touches.
    pub fn register_frozen(&mut self, name: &str, value: Mat) -> Result<()> {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Mat, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let grad = Array2::zeros(value.raw_dim());
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        self.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Mat) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.dim() != value.dim() {
            return Err(crate::error::shape_err(name, p.value.dim(), value.dim()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * g` into the gradient slot of every trainable tensor that
    /// appears in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if p.grad.dim() != g.dim() {
                return Err(crate::error::shape_err(name, p.grad.dim(), g.dim()));
            }
            p.grad.scaled_add(scale, g);
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in self.params.values_mut().filter(|p| p.trainable) {
                p.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }
}

//! Minimal CPU layers with hand-written backward passes.
//!
//! Every layer exposes `forward(&self, ..)` returning the output together with
//! whatever the backward pass needs, so evaluation can share a model across
//! threads while training records a tape.

mod layers;

pub use layers::{
    dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, max_pool_3x3_s2,
    max_pool_backward, relu, relu_backward, BatchNorm2d, BnCache, Conv2d, Linear, PoolCache,
};

use rand_distr::{Distribution, Normal};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution and linear weights; subject to weight decay.
    Weight,
    /// Biases and normalisation affine terms; trained without decay.
    NoDecay,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub kind: ParamKind,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>, kind: ParamKind) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            shape,
            value,
            kind,
            grad: Vec::new(),
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64, kind: ParamKind) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], kind)
    }

    /// He-normal initialisation with the given fan, drawn from a stream keyed by `name`.
    pub fn he_normal(shape: Vec<usize>, fan: usize, seed: u64, name: &str) -> Self {
        Self::normal(shape, (2.0 / fan as f64).sqrt(), seed, name, ParamKind::Weight)
    }

    pub fn normal(shape: Vec<usize>, std: f64, seed: u64, name: &str, kind: ParamKind) -> Self {
        let n: usize = shape.iter().product();
        let mut r = rng::substream(seed, "init", &[name.into()]);
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| dist.sample(&mut r)).collect();
        Self::new(shape, value, kind)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    /// Accumulated gradient; empty until the first backward pass touches it.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Hierarchical traversal of named parameters and buffers.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

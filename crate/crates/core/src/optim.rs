//! Stochastic gradient descent with momentum.

use protodepth_tensor::Tensor;

use crate::error::{Error, Result};

pub struct Sgd {
    momentum: f32,
    clip_norm: Option<f32>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f32, clip_norm: Option<f32>) -> Self {
        Sgd {
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Global L2 norm of a gradient list, in f64.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// `v ← μv + g; p ← p − lr·v`, after optional global-norm clipping.
    /// `lrs` gives one step size per parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f32]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::domain("optimizer", "parameter, gradient and step-size lists differ in length"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::domain("optimizer", "parameter list changed between steps"));
        }
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        for (((p, g), v), &lr) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(lrs) {
            if p.shape() != g.shape() {
                return Err(Error::domain(
                    "optimizer",
                    format!("gradient shape {:?} does not match parameter {:?}", g.shape(), p.shape()),
                ));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

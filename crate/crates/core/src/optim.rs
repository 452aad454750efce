//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const EPS: f64 = 1e-8;

fn check(params: &[f64], grads: &[f64], acc: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != acc.len() {
        return invalid(format!(
            "optimizer shapes differ: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            acc.len()
        ));
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adagrad: `acc += g²`, `p −= lr·g / (√acc + 1e−8)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adagrad {
    pub lr: f64,
    pub acc: Vec<f64>,
}

impl Adagrad {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            acc: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check(params, grads, &self.acc)?;
        for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            *a += g * g;
            *p -= self.lr * g / (a.sqrt() + EPS);
        }
        Ok(())
    }
}

/// RMSprop: `acc ← ρ·acc + (1−ρ)·g²`, `p −= lr·g / (√acc + 1e−8)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub acc: Vec<f64>,
}

impl RmsProp {
    pub const DEFAULT_RHO: f64 = 0.99;

    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            rho: Self::DEFAULT_RHO,
            acc: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check(params, grads, &self.acc)?;
        for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p -= self.lr * g / (a.sqrt() + EPS);
        }
        Ok(())
    }
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check(params, grads, &self.m)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
        Ok(())
    }
}

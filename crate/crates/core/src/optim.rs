//! Stochastic gradient optimizers. Both read each parameter's gradient slot
//! and treat every tensor alike; the centroid bank is just another parameter.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("parameter {param} has a non-finite gradient")]
    NonFiniteGradient { param: usize },
    #[error("parameter {param} changed size from {expected} to {found}")]
    ShapeChanged {
        param: usize,
        expected: usize,
        found: usize,
    },
    #[error("parameter count changed from {expected} to {found}")]
    ParamCount { expected: usize, found: usize },
}

pub trait Optimizer<T: Scalar> {
    /// One update of every tensor in `params` from its gradient slot. A
    /// missing gradient counts as zero. Nothing is modified on error.
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), OptimError>;
}

fn validate<T: Scalar>(params: &[&mut Tensor<T>], state: &[Vec<T>]) -> Result<(), OptimError> {
    if !state.is_empty() && state.len() != params.len() {
        return Err(OptimError::ParamCount {
            expected: state.len(),
            found: params.len(),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if let Some(s) = state.get(i) {
            if s.len() != p.numel() {
                return Err(OptimError::ShapeChanged {
                    param: i,
                    expected: s.len(),
                    found: p.numel(),
                });
            }
        }
        if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(OptimError::NonFiniteGradient { param: i });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), OptimError> {
        validate(params, &self.m)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[T]>::to_vec);
            let values = p.data_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                values[i] = T::of(values[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v := μ·v + g`, `p := p − lr·v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

impl<T: Scalar> Optimizer<T> for MomentumSgd<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), OptimError> {
        validate(params, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().map(<[T]>::to_vec);
            let values = p.data_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                let vi = self.momentum * vel[i].as_f64() + g;
                vel[i] = T::of(vi);
                values[i] = T::of(values[i].as_f64() - self.lr * vi);
            }
        }
        Ok(())
    }
}

//! Adam with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    /// The gradient held NaN or infinity; parameters and moments are untouched.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Scalar>(config: AdamConfig, params: &ParamStore<P>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam {
            config,
            step: 0,
            skipped: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Global L2 norm of the gradients in `params`, or `None` if any is non-finite.
    pub fn grad_norm(params: &ParamStore<T>) -> Option<f64> {
        let mut sq = 0.0f64;
        for (_, t) in params.iter() {
            if let Some(g) = t.grad() {
                for &x in g {
                    let x = x.as_f64();
                    if !x.is_finite() {
                        return None;
                    }
                    sq += x * x;
                }
            }
        }
        Some(sq.sqrt())
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn update(&mut self, params: &mut ParamStore<T>, lr: f64) -> StepOutcome {
        let Some(norm) = Self::grad_norm(params) else {
            self.skipped += 1;
            log::warn!("non-finite gradient; skipping step ({} skipped so far)", self.skipped);
            return StepOutcome::Skipped;
        };
        let c = self.config;
        let clipped = c.clip_norm > 0.0 && norm > c.clip_norm;
        let scale = T::of(if clipped { c.clip_norm / norm } else { 1.0 });
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(c.eps));
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        StepOutcome::Applied { grad_norm: norm, clipped }
    }
}

//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.
//!
//! The optimizer works on flat parameter slices so it needs no knowledge of
//! model structure; callers pass parameter and gradient slices in the same
//! canonical order on every step.

use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW state for a fixed parameter count.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub weight_decay: f64,
}

impl AdamW {
    /// Fresh state for `n_params` scalars with weight decay 0.01.
    pub fn new(n_params: usize) -> Self {
        AdamW {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            weight_decay: 0.01,
        }
    }

    /// One update. `params` and `grads` must cover the same scalars in the
    /// same order as every previous call, and together match the parameter
    /// count given at construction.
    pub fn step(
        &mut self,
        lr: f64,
        mut params: Vec<&mut [f64]>,
        grads: Vec<&[f64]>,
    ) -> Result<()> {
        let n_params: usize = params.iter().map(|p| p.len()).sum();
        let n_grads: usize = grads.iter().map(|g| g.len()).sum();
        if n_params != self.m.len() || n_grads != self.m.len() || params.len() != grads.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer built for {} scalars, got {n_params} params and {n_grads} grads",
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut k = 0;
        for (pslice, gslice) in params.iter_mut().zip(&grads) {
            if pslice.len() != gslice.len() {
                return Err(Error::DimensionMismatch(
                    "parameter and gradient slices are misaligned".into(),
                ));
            }
            for (p, &g) in pslice.iter_mut().zip(gslice.iter()) {
                let m = BETA1 * self.m[k] + (1.0 - BETA1) * g;
                let v = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
                self.m[k] = m;
                self.v[k] = v;
                let update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                *p -= lr * (update + self.weight_decay * *p);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based): linear warmup over `warmup` steps, then
/// cosine decay from `base` to zero across the remaining steps.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

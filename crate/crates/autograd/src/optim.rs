//! First-order optimizers.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::params::{ParamSet, StoredMatrix};
use crate::{cast, Float};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<F>>,
    second: Vec<Array2<F>>,
}

/// Serializable snapshot of [`Adam`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<StoredMatrix>,
    pub second: Vec<StoredMatrix>,
}

impl<F: Float> Adam<F> {
    /// Zero moments shaped like `params`, default coefficients.
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Array2<F>> = params
            .values()
            .iter()
            .map(|v| Array2::zeros(v.dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Array2<F>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1f, b2f): (F, F) = (cast(b1), cast(b2));
        let (one_b1, one_b2): (F, F) = (cast(1.0 - b1), cast(1.0 - b2));
        let step_size: F = cast(lr / c1);
        let inv_c2: F = cast(1.0 / c2);
        let eps: F = cast(self.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1f * *m + one_b1 * g;
                    *v = b2f * *v + one_b2 * g * g;
                    *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
                });
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            first: self.first.iter().map(StoredMatrix::from_array).collect(),
            second: self.second.iter().map(StoredMatrix::from_array).collect(),
        }
    }

    /// Rebuilds an optimizer from a snapshot; `None` if the moment shapes do
    /// not match `params`.
    pub fn from_state(state: &AdamState, params: &ParamSet<F>) -> Option<Self> {
        if state.first.len() != params.len() || state.second.len() != params.len() {
            return None;
        }
        let load = |stored: &[StoredMatrix]| -> Option<Vec<Array2<F>>> {
            stored
                .iter()
                .zip(params.values())
                .map(|(s, p)| s.to_array::<F>().filter(|a| a.dim() == p.dim()))
                .collect()
        };
        Some(Self {
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            step: state.step,
            first: load(&state.first)?,
            second: load(&state.second)?,
        })
    }
}

/// Global L2 norm over a gradient list.
pub fn global_norm<F: Float>(grads: &[Array2<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [Array2<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor: F = cast(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }
    norm
}

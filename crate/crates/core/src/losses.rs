//! Training objectives of the any-to-any strategy.
//!
//! Every function records onto the tape of its inputs so that gradients reach
//! the perturbed side. The inputs carry embeddings and features only; nothing
//! here can see which speaker an utterance came from.

use serde::{Deserialize, Serialize};
use spkanon_autograd::{cast, Float, Var};

use crate::error::{Error, Result};
use crate::nn::cosine_rows;

/// Norm below which an embedding or frame counts as zero.
const ZERO_NORM: f64 = 1e-12;
/// Norm below which the batch pseudo-speaker counts as degenerate.
const DEGENERATE_MEAN: f64 = 1e-8;

/// Mixing weights of the perceptual, angular and batch-mean terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.15,
            gamma: 0.35,
        }
    }
}

impl LossWeights {
    /// The ablation without the batch-mean term.
    pub fn without_batch_mean() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be nonnegative, got {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "loss weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Scalar values of one batch objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub perceptual: f64,
    pub angular: f64,
    pub batch_mean: f64,
    pub total: f64,
    /// Mean of the adversarial embeddings.
    pub pseudo_speaker: Vec<f64>,
    pub k: usize,
}

fn check_rows_nonzero<F: Float>(x: &Var<'_, F>, what: &str) -> Result<()> {
    let value = x.value();
    for (i, row) in value.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(Error::ZeroNorm(format!("{what} row {i}")));
        }
    }
    Ok(())
}

/// `(1/K) Σ_k cos(z_k, z̃_k)` over paired `K × D` embedding matrices.
pub fn angular_loss<'t, F: Float>(
    original: Var<'t, F>,
    adversarial: Var<'t, F>,
) -> Result<Var<'t, F>> {
    if original.shape() != adversarial.shape() || original.shape().0 == 0 {
        return Err(Error::Shape(format!(
            "embedding batches {:?} and {:?} must match and be nonempty",
            original.shape(),
            adversarial.shape()
        )));
    }
    check_rows_nonzero(&original, "original embedding")?;
    check_rows_nonzero(&adversarial, "adversarial embedding")?;
    Ok(cosine_rows(original, adversarial).mean())
}

/// `-(1/ΣT_k) Σ_k Σ_t cos(f_kt, f̃_kt)`, pooled over every frame of every pair.
pub fn perceptual_loss<'t, F: Float>(pairs: &[(Var<'t, F>, Var<'t, F>)]) -> Result<Var<'t, F>> {
    if pairs.is_empty() {
        return Err(Error::Shape("perceptual loss needs at least one pair".into()));
    }
    let mut total_frames = 0usize;
    let mut acc: Option<Var<'t, F>> = None;
    for (k, (orig, pert)) in pairs.iter().enumerate() {
        if orig.shape() != pert.shape() {
            return Err(Error::Shape(format!(
                "pair {k}: original {:?} vs perturbed {:?}",
                orig.shape(),
                pert.shape()
            )));
        }
        check_rows_nonzero(orig, "original feature frame")?;
        check_rows_nonzero(pert, "perturbed feature frame")?;
        total_frames += orig.shape().0;
        let s = cosine_rows(*orig, *pert).sum();
        acc = Some(match acc {
            Some(a) => a.add(s),
            None => s,
        });
    }
    if total_frames == 0 {
        return Err(Error::Shape("perceptual loss over zero frames".into()));
    }
    Ok(acc
        .expect("at least one pair")
        .scale(cast(-1.0 / total_frames as f64)))
}

/// Batch-mean loss `-(1/K) Σ_k cos(z̃_k, μ_b)` and the pseudo-speaker `μ_b`.
pub fn batch_mean_loss<'t, F: Float>(adversarial: Var<'t, F>) -> Result<(Var<'t, F>, Vec<f64>)> {
    let (k, _) = adversarial.shape();
    if k == 0 {
        return Err(Error::Shape("batch-mean loss over an empty batch".into()));
    }
    check_rows_nonzero(&adversarial, "adversarial embedding")?;
    let mu = adversarial.mean_rows();
    let pseudo: Vec<f64> = mu.value().iter().map(|v| v.to_f64_lossy()).collect();
    let norm = pseudo.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= DEGENERATE_MEAN) {
        return Err(Error::DegeneratePseudoSpeaker(norm));
    }
    let dot = adversarial.mul(mu).sum_cols();
    let norms = adversarial.square().sum_cols().sqrt();
    let cos = dot.div(norms.mul(mu.square().sum().sqrt()));
    Ok((cos.mean().neg(), pseudo))
}

/// Everything the batch objective consumes. There is deliberately no field for
/// speaker identity.
pub struct LossInputs<'t, F: Float> {
    /// Per-utterance `(original, perturbed)` feature matrices.
    pub features: Vec<(Var<'t, F>, Var<'t, F>)>,
    /// `K × D` embeddings of the original utterances.
    pub original_embeddings: Var<'t, F>,
    /// `K × D` embeddings of the perturbed utterances.
    pub adversarial_embeddings: Var<'t, F>,
}

/// `α·L_perceptual + β·L_angular + γ·L_BM` and its breakdown.
pub fn total_loss<'t, F: Float>(
    inputs: &LossInputs<'t, F>,
    weights: &LossWeights,
) -> Result<(Var<'t, F>, BatchLossBreakdown)> {
    weights.validate()?;
    let perceptual = perceptual_loss(&inputs.features)?;
    let angular = angular_loss(inputs.original_embeddings, inputs.adversarial_embeddings)?;
    let (batch_mean, pseudo_speaker) = batch_mean_loss(inputs.adversarial_embeddings)?;
    let total = perceptual
        .scale(cast(weights.alpha))
        .add(angular.scale(cast(weights.beta)))
        .add(batch_mean.scale(cast(weights.gamma)));
    let breakdown = BatchLossBreakdown {
        perceptual: perceptual.item().to_f64_lossy(),
        angular: angular.item().to_f64_lossy(),
        batch_mean: batch_mean.item().to_f64_lossy(),
        total: total.item().to_f64_lossy(),
        pseudo_speaker,
        k: inputs.adversarial_embeddings.shape().0,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use spkanon_autograd::Tape;

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights::without_batch_mean().validate().is_ok());
        let bad = LossWeights {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.5,
        };
        assert!(bad.validate().is_err());
        let neg = LossWeights {
            alpha: 1.5,
            beta: -0.5,
            gamma: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn zero_rows_are_rejected() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(arr2(&[[1.0, 0.0], [0.0, 0.0]]));
        assert!(matches!(angular_loss(z, z), Err(Error::ZeroNorm(_))));
        assert!(batch_mean_loss(z).is_err());
        let f = tape.constant(Array2::zeros((2, 3)));
        assert!(perceptual_loss(&[(f, f)]).is_err());
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Array2::ones((2, 3)));
        let b = tape.constant(Array2::ones((3, 3)));
        assert!(perceptual_loss(&[(a, b)]).is_err());
        assert!(angular_loss(a, b).is_err());
        assert!(perceptual_loss::<f64>(&[]).is_err());
    }
}

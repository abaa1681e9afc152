//! FGSM-family speaker attacks on raw waveform samples.
//!
//! All methods ascend `L = -cos(z, z̃)`, where `z` is the embedding of the
//! clean input and `z̃` that of the current candidate, while staying inside
//! an L∞ ball of radius ε around the input:
//!
//! ```text
//! g_{i+1} = η g_i + ∇L / ‖∇L‖₁
//! x̃_{i+1} = clip_ε(x̃_i + α sign(g_{i+1}))
//! ```
//!
//! With η = 0 this is I-FGSM; a single iteration with α = ε is FGSM.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spkanon_autograd::{cast, Float, Tape};

use crate::encoder::{EncoderModel, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::nn::cosine_rows;
use crate::signal::{Analyzer, Waveform, WaveformFrontend};

/// L1 gradient norm below which the normalized gradient is taken as zero.
const TINY_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    IFgsm,
    MiFgsm,
    Gra,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::IFgsm => "i-fgsm",
            AttackMethod::MiFgsm => "mi-fgsm",
            AttackMethod::Gra => "gra",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "i-fgsm" => Ok(AttackMethod::IFgsm),
            "mi-fgsm" => Ok(AttackMethod::MiFgsm),
            "gra" => Ok(AttackMethod::Gra),
            _ => Err(Error::InvalidConfig(format!("unknown attack method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Parsed for GRA, which is not implemented.
    pub nearby_samples: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0012,
            step_size: 0.00012,
            momentum: 1.4,
            iterations: 10,
            seed: 0,
            nearby_samples: 10,
        }
    }
}

impl AttackConfig {
    /// Accepts `0 < α ≤ ε` so that the single-step case `α = ε` is valid.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "step size must satisfy 0 < step_size <= epsilon, got {} and {}",
                self.step_size, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::InvalidConfig(format!("momentum must be >= 0, got {}", self.momentum)));
        }
        Ok(())
    }

    /// The configuration `method` actually runs with.
    pub fn for_method(&self, method: AttackMethod) -> Result<AttackConfig> {
        match method {
            AttackMethod::MiFgsm => Ok(self.clone()),
            AttackMethod::IFgsm => Ok(AttackConfig {
                momentum: 0.0,
                ..self.clone()
            }),
            AttackMethod::Fgsm => Ok(AttackConfig {
                momentum: 0.0,
                iterations: 1,
                step_size: self.epsilon,
                ..self.clone()
            }),
            AttackMethod::Gra => Err(Error::NotImplemented(format!(
                "GRA update rule is not specified (nearby_samples = {} parsed only)",
                self.nearby_samples
            ))),
        }
    }
}

/// Projects `candidate` into the ε-ball around `origin`, then into `[-1, 1]`.
pub fn clip_linf(candidate: &Waveform, origin: &Waveform, epsilon: f64) -> Result<Waveform> {
    if candidate.len() != origin.len() {
        return Err(Error::Shape(format!(
            "candidate has {} samples, origin {}",
            candidate.len(),
            origin.len()
        )));
    }
    let out = candidate
        .samples()
        .iter()
        .zip(origin.samples())
        .map(|(&c, &o)| c.max(o - epsilon).min(o + epsilon))
        .collect();
    Ok(Waveform::from_clamped(out, origin.sample_rate()))
}

/// Frozen encoder plus the differentiable front end the attacks run through.
pub struct AttackModel<'a, F: Float> {
    encoder: &'a EncoderModel<F>,
    frontend: WaveformFrontend<F>,
}

impl<'a, F: Float> AttackModel<'a, F> {
    pub fn new(encoder: &'a EncoderModel<F>, analyzer: &Analyzer) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::InvalidConfig("attacks need a frozen encoder".into()));
        }
        Ok(Self {
            encoder,
            frontend: WaveformFrontend::new(&analyzer.stft, &analyzer.mel)?,
        })
    }

    fn row(w: &Waveform) -> Array2<F> {
        Array2::from_shape_fn((1, w.len()), |(_, i)| cast(w.samples()[i]))
    }

    /// Embedding through the waveform front end.
    pub fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        let tape = Tape::new();
        let p = self.encoder.bind(&tape);
        let feats = self.frontend.features(tape.constant(Self::row(w)))?;
        let z = self.encoder.forward(&p, feats)?;
        SpeakerEmbedding::new(z.value().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// `-cos(z_ref, z̃)` and its gradient with respect to the samples of `w`.
    pub fn loss_and_gradient(&self, w: &Waveform, z_ref: &SpeakerEmbedding) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let p = self.encoder.bind(&tape);
        let x = tape.leaf(Self::row(w));
        let z = self.encoder.forward(&p, self.frontend.features(x)?)?;
        if z.shape().1 != z_ref.dim() {
            return Err(Error::Shape("reference embedding dimension differs".into()));
        }
        let r = tape.constant(Array2::from_shape_fn((1, z_ref.dim()), |(_, j)| cast(z_ref.as_slice()[j])));
        let loss = cosine_rows(r, z).sum().neg();
        let value = loss.item().to_f64_lossy();
        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(x).iter().map(|v| v.to_f64_lossy()).collect();
        Ok((value, g))
    }

    /// The untargeted loss alone.
    pub fn loss(&self, w: &Waveform, z_ref: &SpeakerEmbedding) -> Result<f64> {
        let tape = Tape::new();
        let p = self.encoder.bind(&tape);
        let z = self.encoder.forward(&p, self.frontend.features(tape.constant(Self::row(w)))?)?;
        let r = tape.constant(Array2::from_shape_fn((1, z_ref.dim()), |(_, j)| cast(z_ref.as_slice()[j])));
        Ok(cosine_rows(r, z).sum().neg().item().to_f64_lossy())
    }
}

/// `-cos(z_ref, embed(w̃))` through the full feature pipeline.
pub fn untargeted_speaker_loss<F: Float>(
    w: &Waveform,
    z_ref: &SpeakerEmbedding,
    model: &AttackModel<'_, F>,
) -> Result<f64> {
    model.loss(w, z_ref)
}

/// Result of one attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Waveform,
    /// Every iterate `x̃_1 … x̃_I`.
    pub trajectory: Vec<Waveform>,
    /// Untargeted loss at each iterate.
    pub losses: Vec<f64>,
    pub iterations: usize,
}

impl AttackOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one iteration")
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient at a seeded point one step away from `w`.
///
/// The clean input is a maximum of `cos(z, z̃)`, so the exact gradient there
/// is zero and the iteration would never leave it. The probe point is used
/// only to pick the first direction; the iterate itself still starts at `w`.
/// Digital silence is never probed and comes back unchanged.
fn probe_gradient<F: Float>(
    w: &Waveform,
    model: &AttackModel<'_, F>,
    z_ref: &SpeakerEmbedding,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe: Vec<f64> = w
        .samples()
        .iter()
        .map(|v| v + if rng.random::<bool>() { cfg.step_size } else { -cfg.step_size })
        .collect();
    Ok(model.loss_and_gradient(&Waveform::from_clamped(probe, w.sample_rate()), z_ref)?.1)
}

/// Momentum iterative FGSM with the given configuration.
pub fn mi_fgsm<F: Float>(w: &Waveform, model: &AttackModel<'_, F>, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let z_ref = model.embed(w)?;
    let mut g = vec![0.0; w.len()];
    let mut x = w.clone();
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (_, mut grad) = model.loss_and_gradient(&x, &z_ref)?;
        let mut l1: f64 = grad.iter().map(|v| v.abs()).sum();
        if l1 < TINY_GRADIENT && x == *w && !w.is_silent() {
            grad = probe_gradient(w, model, &z_ref, cfg)?;
            l1 = grad.iter().map(|v| v.abs()).sum();
        }
        let inv = if l1 < TINY_GRADIENT { 0.0 } else { 1.0 / l1 };
        for (gi, di) in g.iter_mut().zip(&grad) {
            *gi = cfg.momentum * *gi + di * inv;
        }
        let stepped: Vec<f64> = x
            .samples()
            .iter()
            .zip(&g)
            .map(|(xi, gi)| xi + cfg.step_size * sign(*gi))
            .collect();
        x = clip_linf(&Waveform::from_clamped(stepped, w.sample_rate()), w, cfg.epsilon)?;
        losses.push(model.loss(&x, &z_ref)?);
        trajectory.push(x.clone());
    }
    Ok(AttackOutcome {
        adversarial: x,
        trajectory,
        losses,
        iterations: cfg.iterations,
    })
}

/// I-FGSM: `mi_fgsm` without momentum.
pub fn i_fgsm<F: Float>(w: &Waveform, model: &AttackModel<'_, F>, cfg: &AttackConfig) -> Result<AttackOutcome> {
    mi_fgsm(w, model, &cfg.for_method(AttackMethod::IFgsm)?)
}

/// Single-step FGSM with step ε.
pub fn fgsm<F: Float>(w: &Waveform, model: &AttackModel<'_, F>, cfg: &AttackConfig) -> Result<AttackOutcome> {
    mi_fgsm(w, model, &cfg.for_method(AttackMethod::Fgsm)?)
}

/// Dispatches on `method`; GRA reports [`Error::NotImplemented`].
pub fn run_attack<F: Float>(
    method: AttackMethod,
    w: &Waveform,
    model: &AttackModel<'_, F>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    mi_fgsm(w, model, &cfg.for_method(method)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;

    #[test]
    fn clip_examples() {
        let o = Waveform::new(vec![0.5, 0.0, -0.999], SAMPLE_RATE).unwrap();
        let c = Waveform::new(vec![0.502, 0.0005, -1.0], SAMPLE_RATE).unwrap();
        let out = clip_linf(&c, &o, 0.0012).unwrap();
        assert!((out.samples()[0] - 0.5012).abs() < 1e-15);
        assert_eq!(out.samples()[1], 0.0005);
        assert_eq!(out.samples()[2], -1.0);
        assert!(clip_linf(&o, &Waveform::zeros(2, SAMPLE_RATE), 0.1).is_err());
    }

    #[test]
    fn config_rules() {
        assert!(AttackConfig::default().validate().is_ok());
        let big_step = AttackConfig {
            step_size: 0.01,
            ..AttackConfig::default()
        };
        assert!(big_step.validate().is_err());
        let fgsm = AttackConfig::default().for_method(AttackMethod::Fgsm).unwrap();
        assert_eq!((fgsm.iterations, fgsm.momentum, fgsm.step_size), (1, 0.0, 0.0012));
        assert!(fgsm.validate().is_ok());
        let err = AttackConfig::default().for_method(AttackMethod::Gra).unwrap_err();
        assert!(err.to_string().contains("not implemented"));
        assert!(AttackConfig {
            iterations: 0,
            ..AttackConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn method_names() {
        for m in [AttackMethod::Fgsm, AttackMethod::IFgsm, AttackMethod::MiFgsm, AttackMethod::Gra] {
            assert_eq!(m.to_string().parse::<AttackMethod>().unwrap(), m);
        }
        assert!("pgd".parse::<AttackMethod>().is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.0), 1.0);
    }
}

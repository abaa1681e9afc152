//! Conformer perturbation generator and the anonymization pipeline.
//!
//! The generator reads `ln(1 + S)` for a `T × n_bins` magnitude matrix `S`
//! and emits a perturbation `P` of the same shape in linear magnitude units.
//! Anonymization adds `P`, clamps at zero, and resynthesizes with the
//! original phase. Nothing in this path knows about speakers.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spkanon_autograd::{cast, BoundParams, Float, ParamId, ParamSet, Tape, Var};

use crate::checkpoint::{Checkpoint, Component};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::signal::{clamp_magnitude, istft, stft, StftConfig, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply<'t, F: Float>(self, x: Var<'t, F>) -> Var<'t, F> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub conv_kernel: usize,
    pub n_heads: usize,
    /// Feed-forward width.
    pub hidden_size: usize,
    /// Input and output width, equal to the number of STFT bins.
    pub io_size: usize,
    /// Width of the residual stream inside the blocks.
    pub model_dim: usize,
    pub activation: Activation,
    /// Relative offsets beyond this share one attention bias.
    pub max_relative_position: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            conv_kernel: 31,
            n_heads: 4,
            hidden_size: 1024,
            io_size: 256,
            model_dim: 256,
            activation: Activation::Relu,
            max_relative_position: 64,
        }
    }
}

impl GeneratorConfig {
    /// Small preset for single-core experiments.
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 2,
            hidden_size: 256,
            model_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.io_size == 0 || self.hidden_size == 0 {
            return Err(Error::InvalidConfig("generator sizes must be positive".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} heads do not divide model_dim {}",
                self.n_heads, self.model_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<F: Float>(p: &mut ParamSet<F>, name: &str, c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNorm::new(p, &format!("{name}.norm"), c.model_dim),
            up: Linear::new(p, &format!("{name}.up"), c.model_dim, c.hidden_size, true, rng),
            down: Linear::new(p, &format!("{name}.down"), c.hidden_size, c.model_dim, true, rng),
        }
    }

    fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>, act: Activation) -> Var<'t, F> {
        let h = act.apply(self.up.forward(p, self.norm.forward(p, x)));
        self.down.forward(p, h)
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    /// One row of learned biases per head, indexed by clipped offset.
    relative_bias: Vec<ParamId>,
}

impl SelfAttention {
    fn new<F: Float>(p: &mut ParamSet<F>, name: &str, c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = c.model_dim;
        Self {
            norm: LayerNorm::new(p, &format!("{name}.norm"), d),
            query: Linear::new(p, &format!("{name}.query"), d, d, true, rng),
            key: Linear::new(p, &format!("{name}.key"), d, d, true, rng),
            value: Linear::new(p, &format!("{name}.value"), d, d, true, rng),
            out: Linear::new(p, &format!("{name}.out"), d, d, true, rng),
            relative_bias: (0..c.n_heads)
                .map(|h| {
                    p.add(
                        format!("{name}.relative_bias{h}"),
                        Array2::zeros((1, 2 * c.max_relative_position + 1)),
                    )
                })
                .collect(),
        }
    }

    fn offsets(frames: usize, max: usize) -> Rc<Vec<usize>> {
        let max = max as isize;
        let mut idx = Vec::with_capacity(frames * frames);
        for i in 0..frames as isize {
            for j in 0..frames as isize {
                idx.push(((j - i).clamp(-max, max) + max) as usize);
            }
        }
        Rc::new(idx)
    }

    fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>, c: &GeneratorConfig) -> Var<'t, F> {
        let (frames, d) = x.shape();
        let h = self.norm.forward(p, x);
        let (q, k, v) = (
            self.query.forward(p, h),
            self.key.forward(p, h),
            self.value.forward(p, h),
        );
        let head_dim = d / c.n_heads;
        let scale: F = cast(1.0 / (head_dim as f64).sqrt());
        let offsets = Self::offsets(frames, c.max_relative_position);
        let heads: Vec<Var<'t, F>> = (0..c.n_heads)
            .map(|hd| {
                let (lo, hi) = (hd * head_dim, (hd + 1) * head_dim);
                let bias = p.get(self.relative_bias[hd]).gather(frames, frames, Rc::clone(&offsets));
                let scores = q
                    .slice_cols(lo, hi)
                    .matmul_t(k.slice_cols(lo, hi))
                    .scale(scale)
                    .add(bias);
                scores.softmax_rows().matmul(v.slice_cols(lo, hi))
            })
            .collect();
        self.out.forward(p, Var::concat_cols(&heads))
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn new<F: Float>(p: &mut ParamSet<F>, name: &str, c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = c.model_dim;
        let bound = (1.0 / c.conv_kernel as f64).sqrt();
        let kernel = Array2::from_shape_fn((c.conv_kernel, d), |_| {
            cast(rand::Rng::random_range(rng, -bound..bound))
        });
        Self {
            norm: LayerNorm::new(p, &format!("{name}.norm"), d),
            pointwise_in: Linear::new(p, &format!("{name}.pointwise_in"), d, 2 * d, true, rng),
            depthwise: p.add(format!("{name}.depthwise"), kernel),
            depthwise_bias: p.add(format!("{name}.depthwise_bias"), Array2::zeros((1, d))),
            mid_norm: LayerNorm::new(p, &format!("{name}.mid_norm"), d),
            pointwise_out: Linear::new(p, &format!("{name}.pointwise_out"), d, d, true, rng),
        }
    }

    fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>, act: Activation) -> Var<'t, F> {
        let d = x.shape().1;
        let h = self.pointwise_in.forward(p, self.norm.forward(p, x));
        let glu = h.slice_cols(0, d).mul(h.slice_cols(d, 2 * d).sigmoid());
        let conv = glu
            .depthwise_conv_rows(p.get(self.depthwise))
            .add(p.get(self.depthwise_bias));
        let h = act.apply(self.mid_norm.forward(p, conv));
        self.pointwise_out.forward(p, h)
    }
}

#[derive(Debug, Clone)]
struct ConformerBlock {
    ff1: FeedForward,
    attention: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    norm: LayerNorm,
}

impl ConformerBlock {
    fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>, c: &GeneratorConfig) -> Var<'t, F> {
        let half: F = cast(0.5);
        let x = x.add(self.ff1.forward(p, x, c.activation).scale(half));
        let x = x.add(self.attention.forward(p, x, c));
        let x = x.add(self.conv.forward(p, x, c.activation));
        let x = x.add(self.ff2.forward(p, x, c.activation).scale(half));
        self.norm.forward(p, x)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    output: Linear,
}

impl Layers {
    fn build<F: Float>(c: &GeneratorConfig, seed: u64) -> (Self, ParamSet<F>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let input = Linear::new(&mut p, "input", c.io_size, c.model_dim, true, &mut rng);
        let blocks = (0..c.n_blocks)
            .map(|b| {
                let name = format!("block{b}");
                ConformerBlock {
                    ff1: FeedForward::new(&mut p, &format!("{name}.ff1"), c, &mut rng),
                    attention: SelfAttention::new(&mut p, &format!("{name}.attention"), c, &mut rng),
                    conv: ConvModule::new(&mut p, &format!("{name}.conv"), c, &mut rng),
                    ff2: FeedForward::new(&mut p, &format!("{name}.ff2"), c, &mut rng),
                    norm: LayerNorm::new(&mut p, &format!("{name}.norm"), c.model_dim),
                }
            })
            .collect();
        let output = Linear::zeros(&mut p, "output", c.model_dim, c.io_size);
        (Self { input, blocks, output }, p)
    }
}

/// A perturbation matrix `P`, same shape as the magnitudes it perturbs.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub values: Array2<f64>,
}

/// Conformer that maps magnitudes to additive perturbations.
#[derive(Debug, Clone)]
pub struct PerturbationGenerator<F: Float = f32> {
    config: GeneratorConfig,
    layers: Layers,
    params: ParamSet<F>,
}

impl<F: Float> PerturbationGenerator<F> {
    /// Random blocks with a zero output projection.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, params) = Layers::build(&config, seed);
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn cast<G: Float>(&self) -> PerturbationGenerator<G> {
        PerturbationGenerator {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    /// Whether the output projection is identically zero.
    pub fn output_is_zero(&self) -> bool {
        let w = self.params.get(self.layers.output.weight());
        let b = self
            .params
            .id_of("output.bias")
            .map(|id| self.params.get(id).iter().all(|v| *v == F::zero()))
            .unwrap_or(true);
        b && w.iter().all(|v| *v == F::zero())
    }

    /// Zeroes the output projection, giving the identity anonymizer.
    pub fn zero_output(&mut self) {
        let w = self.layers.output.weight();
        self.params.get_mut(w).fill(F::zero());
        if let Some(b) = self.params.id_of("output.bias") {
            self.params.get_mut(b).fill(F::zero());
        }
    }

    /// `P` for a `T × io_size` magnitude matrix on a tape.
    pub fn forward<'t>(&self, p: &BoundParams<'t, F>, magnitude: Var<'t, F>) -> Result<Var<'t, F>> {
        let (frames, width) = magnitude.shape();
        if width != self.config.io_size {
            return Err(Error::Shape(format!(
                "generator expects {} bins, got {width}",
                self.config.io_size
            )));
        }
        if frames == 0 {
            return Err(Error::Shape("generator input has no frames".into()));
        }
        let mut x = self
            .layers
            .input
            .forward(p, magnitude.add_scalar(F::one()).ln());
        for block in &self.layers.blocks {
            x = block.forward(p, x, &self.config);
        }
        Ok(self.layers.output.forward(p, x))
    }

    /// Inference-mode perturbation.
    pub fn generate_perturbation(&self, s: &Array2<f64>) -> Result<Perturbation> {
        if s.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Shape("magnitudes must be nonnegative".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(s.mapv(cast)))?;
        Ok(Perturbation {
            values: out.value().mapv(|v| v.to_f64_lossy()),
        })
    }

    /// Writes the generator, with optional training state for resuming.
    pub fn save_with<T: Serialize>(&self, path: &Path, training: Option<&T>) -> Result<()> {
        let mut ckpt = Checkpoint::from_params(Component::Generator, &self.config, &self.params)?;
        if let Some(t) = training {
            ckpt = ckpt.with_training(t)?;
        }
        ckpt.save(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with::<()>(path, None)
    }

    /// Loads a generator checkpoint and returns it with the raw container.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path, Component::Generator)?;
        let config: GeneratorConfig = ckpt.config(path)?;
        let mut g = Self::new(config, 0).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ckpt.restore_into(path, &mut g.params)?;
        Ok((g, ckpt))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_checkpoint(path)?.0)
    }
}

/// `max(S + P, 0)`.
pub fn perturb(s: &Array2<f64>, p: &Perturbation) -> Result<Array2<f64>> {
    if s.dim() != p.values.dim() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs perturbation {:?}",
            s.dim(),
            p.values.dim()
        )));
    }
    Ok(clamp_magnitude(&(s + &p.values)))
}

/// Perturbs the STFT magnitude of `w` and resynthesizes with its own phase.
pub fn anonymize<F: Float>(w: &Waveform, g: &PerturbationGenerator<F>, cfg: &StftConfig) -> Result<Waveform> {
    let spec = stft(w, cfg)?;
    let p = g.generate_perturbation(&spec.magnitude)?;
    istft(&spec.with_magnitude(perturb(&spec.magnitude, &p)?)?, cfg)
}

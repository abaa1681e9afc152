//! Speaker embedding network, cosine scoring and a reference trainer.
//!
//! The reference encoder is a stack of dilated 1-D convolutions over log
//! filterbank frames, followed by mean and standard-deviation pooling and a
//! linear projection. It is trained as a speaker classifier with an
//! additive-margin softmax head that is thrown away afterwards.

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spkanon_autograd::optim::{clip_global_norm, Adam};
use spkanon_autograd::{cast, BoundParams, Float, ParamSet, Tape, Var};

use crate::checkpoint::{Checkpoint, Component};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, make_trials, score_trials, Protocol};
use crate::nn::{l2_normalize_rows, Conv1d, LayerNorm, Linear};
use crate::signal::{Analyzer, FeatureFrames};

/// A fixed-length speaker vector with nonzero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("embedding has non-finite entries".into()));
        }
        if norm(&vector) == 0.0 {
            return Err(Error::ZeroNorm("speaker embedding".into()));
        }
        Ok(Self { vector })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (norm(&a.vector) * norm(&b.vector))).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            channels: 128,
            kernels: vec![5, 3, 3],
            dilations: vec![1, 2, 3],
            embed_dim: 192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        if self.kernels.is_empty() || self.kernels.len() != self.dilations.len() {
            return Err(Error::InvalidConfig(
                "encoder needs one dilation per kernel and at least one layer".into(),
            ));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) || self.dilations.contains(&0) {
            return Err(Error::InvalidConfig(
                "encoder kernels must be odd and dilations positive".into(),
            ));
        }
        Ok(())
    }

    /// Receptive field of the convolution stack, the fewest frames accepted.
    pub fn min_frames(&self) -> usize {
        1 + self
            .kernels
            .iter()
            .zip(&self.dilations)
            .map(|(k, d)| (k - 1) * d)
            .sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct Layers {
    convs: Vec<(Conv1d, LayerNorm)>,
    projection: Linear,
}

impl Layers {
    fn build<F: Float>(config: &EncoderConfig, seed: u64) -> (Self, ParamSet<F>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut width = config.n_mels;
        let mut convs = Vec::new();
        for (i, (&k, &d)) in config.kernels.iter().zip(&config.dilations).enumerate() {
            let conv = Conv1d::new(&mut params, &format!("conv{i}"), width, config.channels, k, d, &mut rng);
            let norm = LayerNorm::new(&mut params, &format!("norm{i}"), config.channels);
            convs.push((conv, norm));
            width = config.channels;
        }
        let projection = Linear::new(&mut params, "projection", 2 * width, config.embed_dim, true, &mut rng);
        (Self { convs, projection }, params)
    }
}

/// Speaker encoder with its parameters and a frozen flag.
#[derive(Debug, Clone)]
pub struct EncoderModel<F: Float = f32> {
    config: EncoderConfig,
    layers: Layers,
    params: ParamSet<F>,
    frozen: bool,
}

impl<F: Float> EncoderModel<F> {
    /// Randomly initialized, unfrozen encoder.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, params) = Layers::build(&config, seed);
        Ok(Self {
            config,
            layers,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    /// Mutable parameters, refused once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<F>> {
        if self.frozen {
            return Err(Error::InvalidConfig("encoder is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Sets the frozen flag. Freezing twice is the same as freezing once.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// SHA-256 over every parameter.
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// The same model in another precision.
    pub fn cast<G: Float>(&self) -> EncoderModel<G> {
        EncoderModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
        }
    }

    /// Parameters on `tape`; they are leaves only while the model is unfrozen.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> BoundParams<'t, F> {
        self.params.bind(tape, !self.frozen)
    }

    /// Embedding of one `T × n_mels` feature matrix as a `1 × D` row.
    pub fn forward<'t>(&self, p: &BoundParams<'t, F>, features: Var<'t, F>) -> Result<Var<'t, F>> {
        let (frames, width) = features.shape();
        if width != self.config.n_mels {
            return Err(Error::Shape(format!(
                "encoder expects {} mel bands, got {width}",
                self.config.n_mels
            )));
        }
        let min = self.config.min_frames();
        if frames < min {
            return Err(Error::TooFewFrames { frames, min });
        }
        let mut x = features.sub(features.mean_rows());
        for (conv, norm) in &self.layers.convs {
            x = norm.forward(p, conv.forward(p, x).relu());
        }
        let mean = x.mean_rows();
        let centered = x.sub(mean);
        let std = centered.square().mean_rows().add_scalar(cast(1e-5)).sqrt();
        Ok(self.layers.projection.forward(p, Var::concat_cols(&[mean, std])))
    }

    /// Inference-mode embedding.
    pub fn embed(&self, f: &FeatureFrames) -> Result<SpeakerEmbedding> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let z = self.forward(&p, tape.constant(f.frames.mapv(cast)))?;
        SpeakerEmbedding::new(z.value().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Writes a versioned checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Checkpoint::from_params(Component::Encoder, &self.config, &self.params.cast::<f64>())?
            .with_flag("frozen", self.frozen)
            .save(path)
    }

    /// Reads a checkpoint written by [`EncoderModel::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path, Component::Encoder)?;
        let config: EncoderConfig = ckpt.config(path)?;
        let mut model = Self::new(config, 0).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ckpt.restore_into(path, &mut model.params)?;
        model.frozen = ckpt.flag("frozen");
        Ok(model)
    }
}

/// Settings of [`train_reference_encoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Frames per training crop.
    pub crop_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub margin: f64,
    pub scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            steps: 300,
            batch_size: 16,
            crop_frames: 100,
            peak_lr: 2e-3,
            warmup_steps: 20,
            margin: 0.2,
            scale: 30.0,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Outcome of reference training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub steps: usize,
    pub n_speakers: usize,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// EER on original-speech trials of the validation split.
    pub validation_eer: f64,
    pub validation_trials: usize,
    pub fingerprint: String,
}

/// Trains the reference encoder with an additive-margin softmax head.
///
/// The head is discarded; the returned model is unfrozen. The run is a pure
/// function of the corpora and `cfg` (including its seed).
pub fn train_reference_encoder(
    train: &Corpus,
    validation: &Corpus,
    analyzer: &Analyzer,
    cfg: &EncoderTrainConfig,
) -> Result<(EncoderModel<f32>, EncoderTrainReport)> {
    let groups = train.by_speaker();
    if groups.len() < 2 {
        return Err(Error::Corpus(format!(
            "encoder training needs at least 2 speakers, found {}",
            groups.len()
        )));
    }
    if let Some((s, idx)) = groups.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::Corpus(format!(
            "speaker {s} has {} utterance(s), need at least 2",
            idx.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig("batch_size and steps must be positive".into()));
    }
    let mut model = EncoderModel::<f32>::new(cfg.encoder.clone(), cfg.seed)?;
    if cfg.crop_frames < cfg.encoder.min_frames() {
        return Err(Error::InvalidConfig(format!(
            "crop of {} frames is below the receptive field {}",
            cfg.crop_frames,
            cfg.encoder.min_frames()
        )));
    }

    let speakers: Vec<&String> = groups.keys().collect();
    let mut examples: Vec<(Array2<f32>, usize)> = Vec::with_capacity(train.len());
    for u in train.utterances() {
        let label = speakers.binary_search(&&u.speaker).expect("speaker from the same corpus");
        let f = analyzer.features(&u.waveform)?;
        if f.num_frames() < cfg.encoder.min_frames() {
            return Err(Error::TooFewFrames {
                frames: f.num_frames(),
                min: cfg.encoder.min_frames(),
            });
        }
        examples.push((f.frames.mapv(|v| v as f32), label));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4c0);
    let mut head = ParamSet::<f32>::new();
    let bound = (1.0 / cfg.encoder.embed_dim as f64).sqrt();
    let head_id = head.add(
        "head",
        Array2::from_shape_fn((cfg.encoder.embed_dim, speakers.len()), |_| {
            rng.random_range(-bound..bound) as f32
        }),
    );
    let mut opt = Adam::new(&model.params);
    let mut head_opt = Adam::new(&head);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..examples.len()))
            .collect();
        let tape = Tape::new();
        let p = model.bind(&tape);
        let h = head.bind(&tape, true);
        let mut rows = Vec::with_capacity(picks.len());
        let mut labels = Vec::with_capacity(picks.len());
        for &i in &picks {
            let (frames, label) = &examples[i];
            let t = frames.nrows();
            let len = cfg.crop_frames.min(t);
            let start = rng.random_range(0..=t - len);
            let crop = frames.slice(ndarray::s![start..start + len, ..]).to_owned();
            rows.push(model.forward(&p, tape.constant(crop))?);
            labels.push(*label);
        }
        let e = l2_normalize_rows(Var::concat_rows(&rows));
        let w = h.get(head_id);
        let w = w.div(w.square().sum_rows().add_scalar(1e-12).sqrt());
        let mut margin = Array2::<f32>::zeros((labels.len(), speakers.len()));
        for (r, &l) in labels.iter().enumerate() {
            margin[[r, l]] = cfg.margin as f32;
        }
        let logits = e
            .matmul(w)
            .sub(tape.constant(margin))
            .scale(cfg.scale as f32);
        let loss = logits.cross_entropy(Rc::new(labels));
        let value = loss.item() as f64;
        let grads = tape.backward(loss);
        let mut g = p.gradients(&grads);
        let mut gh = h.gradients(&grads);
        clip_global_norm(&mut g, cfg.grad_clip);
        clip_global_norm(&mut gh, cfg.grad_clip);
        let warm = (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        let lr = cfg.peak_lr * warm * (1.0 - 0.9 * step as f64 / cfg.steps as f64);
        opt.step(model.params_mut()?, &g, lr);
        head_opt.step(&mut head, &gh, lr);
        losses.push(value);
        if step % 50 == 0 || step == cfg.steps {
            tracing::info!(step, loss = value, "encoder training");
        }
    }

    let trials = make_trials(validation, Protocol::Original, cfg.seed)?;
    let scores = score_trials(&trials, validation, &model, analyzer, &mut |u| {
        Ok(u.waveform.clone())
    })?;
    let report = EncoderTrainReport {
        steps: cfg.steps,
        n_speakers: speakers.len(),
        final_loss: *losses.last().expect("at least one step"),
        losses,
        validation_eer: compute_eer(&scores)?,
        validation_trials: trials.trials.len(),
        fingerprint: model.fingerprint(),
    };
    Ok((model, report))
}

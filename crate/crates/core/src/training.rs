//! Mini-batch training of the perturbation generator against a frozen
//! speaker encoder.
//!
//! Each step draws `K` crops, perturbs their magnitudes with the generator,
//! and minimizes the weighted perceptual, angular and batch-mean objective.
//! Batches are a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint sees exactly the batches an uninterrupted run would.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spkanon_autograd::optim::{clip_global_norm, Adam, AdamState};
use spkanon_autograd::{cast, Float, Tape, Var};

use crate::corpus::Corpus;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::generator::PerturbationGenerator;
use crate::losses::{total_loss, BatchLossBreakdown, LossInputs, LossWeights};
use crate::signal::{Analyzer, FeatureFrontend, Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Per-step multiplicative decay after warm-up.
    pub decay_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub grad_clip: f64,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_seconds: 3.0,
            peak_lr: 1e-3,
            warmup_steps: 9600,
            decay_rate: 0.9999,
            total_steps: 100_000,
            seed: 0,
            loss_weights: LossWeights::default(),
            grad_clip: 5.0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Small preset for single-core experiments.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            crop_seconds: 1.0,
            warmup_steps: 20,
            total_steps: 1200,
            checkpoint_every: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be at least 1".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.crop_seconds > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig(
                "peak_lr, crop_seconds and grad_clip must be positive".into(),
            ));
        }
        self.loss_weights.validate()
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

/// Linear warm-up to `peak_lr`, then exponential decay. Steps count from 1.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps.max(1);
    if step <= warmup {
        cfg.peak_lr * step as f64 / warmup as f64
    } else {
        cfg.peak_lr * cfg.decay_rate.powi((step - warmup) as i32)
    }
}

/// One rectangular batch of crops.
///
/// `speakers` is bookkeeping for inspection and logging. The training step
/// reads only `crops`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub crops: Vec<Waveform>,
    pub speakers: Vec<String>,
    /// Whether each crop was zero-padded because its utterance was short.
    pub padded: Vec<bool>,
}

/// Deterministic batch source over a corpus.
pub struct BatchSampler<'c> {
    corpus: &'c Corpus,
    groups: Vec<Vec<usize>>,
    batch_size: usize,
    crop: usize,
    seed: u64,
}

impl<'c> BatchSampler<'c> {
    pub fn new(corpus: &'c Corpus, cfg: &TrainConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("cannot draw batches from an empty corpus".into()));
        }
        if corpus.len() < cfg.batch_size {
            return Err(Error::Corpus(format!(
                "corpus has {} utterances, fewer than the batch size {}",
                corpus.len(),
                cfg.batch_size
            )));
        }
        Ok(Self {
            corpus,
            groups: corpus.by_speaker().into_values().collect(),
            batch_size: cfg.batch_size,
            crop: cfg.crop_samples(),
            seed: cfg.seed,
        })
    }

    /// The batch used at `step`.
    ///
    /// Speakers are distinct when the corpus has at least `K` of them and are
    /// drawn with replacement otherwise.
    pub fn batch(&self, step: usize) -> TrainingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64);
        let speakers: Vec<usize> = if self.groups.len() >= self.batch_size {
            let mut all: Vec<usize> = (0..self.groups.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(self.batch_size);
            all
        } else {
            (0..self.batch_size)
                .map(|_| rng.random_range(0..self.groups.len()))
                .collect()
        };
        let mut batch = TrainingBatch {
            crops: Vec::with_capacity(self.batch_size),
            speakers: Vec::with_capacity(self.batch_size),
            padded: Vec::with_capacity(self.batch_size),
        };
        for s in speakers {
            let group = &self.groups[s];
            let u = &self.corpus.utterances()[group[rng.random_range(0..group.len())]];
            let x = u.waveform.samples();
            let (crop, padded) = if x.len() >= self.crop {
                let start = rng.random_range(0..=x.len() - self.crop);
                (x[start..start + self.crop].to_vec(), false)
            } else {
                tracing::warn!(utterance = %u.id, "utterance shorter than the crop; zero-padded");
                let mut v = x.to_vec();
                v.resize(self.crop, 0.0);
                (v, true)
            };
            batch.crops.push(Waveform::from_clamped(crop, u.waveform.sample_rate()));
            batch.speakers.push(u.speaker.clone());
            batch.padded.push(padded);
        }
        batch
    }

    /// Batches for steps `first, first + 1, …`.
    pub fn stream(&self, first: usize) -> impl Iterator<Item = TrainingBatch> + '_ {
        (first..).map(move |step| self.batch(step))
    }
}

/// A seeded batch source over `corpus`.
pub fn make_batches<'c>(corpus: &'c Corpus, cfg: &TrainConfig) -> Result<BatchSampler<'c>> {
    BatchSampler::new(corpus, cfg)
}

/// What one training step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Loss components; absent when the batch was skipped.
    pub perceptual: Option<f64>,
    pub angular: Option<f64>,
    pub batch_mean: Option<f64>,
    pub total: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// Forward pass of one batch on `tape`: total loss and breakdown.
///
/// The inputs are the crops alone, so the objective cannot depend on who
/// spoke them.
pub fn batch_objective<'t, F: Float>(
    tape: &'t Tape<F>,
    crops: &[Waveform],
    generator: &PerturbationGenerator<F>,
    generator_params: &spkanon_autograd::BoundParams<'t, F>,
    encoder: &EncoderModel<F>,
    analyzer: &Analyzer,
    weights: &LossWeights,
) -> Result<(Var<'t, F>, BatchLossBreakdown)> {
    if !encoder.is_frozen() {
        return Err(Error::InvalidConfig("generator training needs a frozen encoder".into()));
    }
    let frontend = FeatureFrontend::<F>::new(&analyzer.mel);
    let ep = encoder.bind(tape);
    let mut features = Vec::with_capacity(crops.len());
    let mut original = Vec::with_capacity(crops.len());
    let mut adversarial = Vec::with_capacity(crops.len());
    for crop in crops {
        let spec = analyzer.spectrogram(crop)?;
        let s = tape.constant(spec.magnitude.mapv(cast::<F>));
        let f = frontend.from_magnitude(s);
        let p = generator.forward(generator_params, s)?;
        let f_adv = frontend.from_magnitude(s.add(p).relu());
        original.push(encoder.forward(&ep, f)?);
        adversarial.push(encoder.forward(&ep, f_adv)?);
        features.push((f, f_adv));
    }
    let inputs = LossInputs {
        features,
        original_embeddings: Var::concat_rows(&original),
        adversarial_embeddings: Var::concat_rows(&adversarial),
    };
    total_loss(&inputs, weights)
}

/// Generator, optimizer and step counter.
pub struct Trainer<'a> {
    pub generator: PerturbationGenerator<f32>,
    optimizer: Adam<f32>,
    step: usize,
    encoder: &'a EncoderModel<f32>,
    analyzer: &'a Analyzer,
    cfg: TrainConfig,
}

/// State saved alongside generator parameters for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: usize,
    pub optimizer: AdamState,
    pub config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        generator: PerturbationGenerator<f32>,
        encoder: &'a EncoderModel<f32>,
        analyzer: &'a Analyzer,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !encoder.is_frozen() {
            return Err(Error::InvalidConfig("generator training needs a frozen encoder".into()));
        }
        Ok(Self {
            optimizer: Adam::new(generator.params()),
            generator,
            step: 0,
            encoder,
            analyzer,
            cfg,
        })
    }

    /// Restores a trainer from a generator checkpoint carrying training state.
    pub fn resume(
        path: &Path,
        encoder: &'a EncoderModel<f32>,
        analyzer: &'a Analyzer,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let (generator, ckpt) = PerturbationGenerator::<f32>::load_checkpoint(path)?;
        let state: TrainingState = ckpt.training(path)?.ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "no training state to resume from".into(),
        })?;
        let optimizer = Adam::from_state(&state.optimizer, generator.params()).ok_or_else(|| {
            Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "optimizer state does not match the generator".into(),
            }
        })?;
        let mut trainer = Self::new(generator, encoder, analyzer, cfg)?;
        trainer.optimizer = optimizer;
        trainer.step = state.step;
        Ok(trainer)
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            optimizer: self.optimizer.state(),
            config: self.cfg.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.generator.save_with(path, Some(&self.state()))
    }

    /// One optimization step on `batch`.
    ///
    /// A batch whose pseudo-speaker vanishes is skipped with a warning; the
    /// step counter still advances so the batch stream stays aligned.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<StepRecord> {
        let step = self.step + 1;
        let lr = lr_schedule(step, &self.cfg);
        let w = self.cfg.loss_weights;
        let tape = Tape::new();
        let gp = self.generator.params().bind(&tape, true);
        let outcome = batch_objective(
            &tape,
            &batch.crops,
            &self.generator,
            &gp,
            self.encoder,
            self.analyzer,
            &w,
        );
        let mut record = StepRecord {
            step,
            lr,
            perceptual: None,
            angular: None,
            batch_mean: None,
            total: None,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            grad_norm: 0.0,
            clipped: false,
            skipped: false,
        };
        match outcome {
            Ok((loss, breakdown)) => {
                let grads = tape.backward(loss);
                let mut g = gp.gradients(&grads);
                let norm = clip_global_norm(&mut g, self.cfg.grad_clip);
                if norm > self.cfg.grad_clip {
                    tracing::debug!(step, norm, "gradient clipped");
                }
                self.optimizer.step(self.generator.params_mut(), &g, lr);
                record.perceptual = Some(breakdown.perceptual);
                record.angular = Some(breakdown.angular);
                record.batch_mean = Some(breakdown.batch_mean);
                record.total = Some(breakdown.total);
                record.grad_norm = norm;
                record.clipped = norm > self.cfg.grad_clip;
            }
            Err(Error::DegeneratePseudoSpeaker(n)) => {
                tracing::warn!(step, norm = n, "degenerate pseudo-speaker; batch skipped");
                record.skipped = true;
            }
            Err(e) => return Err(e),
        }
        self.step = step;
        Ok(record)
    }
}

/// Files produced by [`train_generator`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Trains until `cfg.total_steps`, writing `metrics.jsonl`, periodic
/// `checkpoint-<step>.json` files and `generator.json` into `run_dir`.
///
/// With `resume`, training continues from that checkpoint and appends to the
/// existing metrics log, which is first truncated to the resumed step.
pub fn train_generator(
    corpus: &Corpus,
    encoder: &EncoderModel<f32>,
    analyzer: &Analyzer,
    generator: PerturbationGenerator<f32>,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, encoder, analyzer, cfg.clone())?,
        None => Trainer::new(generator, encoder, analyzer, cfg.clone())?,
    };
    let sampler = BatchSampler::new(corpus, cfg)?;
    let metrics = run_dir.join("metrics.jsonl");
    truncate_metrics(&metrics, trainer.step())?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let mut records = Vec::new();
    let start = trainer.step() + 1;
    for (step, batch) in (start..=cfg.total_steps).zip(sampler.stream(start)) {
        let record = trainer.train_step(&batch)?;
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics, e))?;
        if step % 10 == 0 || step == cfg.total_steps {
            tracing::info!(step, total = ?record.total, lr = record.lr, "generator training");
        }
        records.push(record);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            trainer.save(&run_dir.join(format!("checkpoint-{step}.json")))?;
        }
    }
    let final_checkpoint = run_dir.join("generator.json");
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics,
        records,
    })
}

/// Keeps only the first `steps` records of a metrics log.
fn truncate_metrics(path: &Path, steps: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(file)
        .lines()
        .take(steps)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads every record of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Evaluation(format!("bad metrics record: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(9600, &cfg), 0.001);
        assert!((lr_schedule(4800, &cfg) - 0.0005).abs() < 1e-15);
        assert!((lr_schedule(9600 + 10, &cfg) - 0.001 * 0.9999f64.powi(10)).abs() < 1e-15);
        assert!(lr_schedule(1, &cfg) > 0.0);
        let below = lr_schedule(9600, &cfg);
        let above = lr_schedule(9601, &cfg);
        assert!((below - above).abs() <= (1.0 - cfg.decay_rate) * below + 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::desk()
            },
            TrainConfig {
                warmup_steps: 0,
                ..TrainConfig::desk()
            },
            TrainConfig {
                decay_rate: 1.5,
                ..TrainConfig::desk()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn truncating_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "a\nb\nc\n").unwrap();
        truncate_metrics(&path, 2).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a\nb\n");
        truncate_metrics(&path, 0).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }
}

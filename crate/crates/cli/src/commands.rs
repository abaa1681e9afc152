use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use spkanon::attacks::{run_attack, AttackMethod, AttackModel};
use spkanon::corpus::{read_manifest, synthesize_toy_corpus, write_manifest, Corpus, Utterance};
use spkanon::encoder::{train_reference_encoder, EncoderModel};
use spkanon::evaluation::{
    read_trials, score_trials, spectral_similarity, write_trials, EvaluationReport, Protocol, Transform,
};
use spkanon::generator::{self, PerturbationGenerator};
use spkanon::losses::LossWeights;
use spkanon::signal::{load_waveform, save_waveform, Analyzer, Waveform};
use spkanon::training;

use crate::config::RunConfig;
use crate::{Ablation, Global, Split};

/// Resolves the configuration, prepares the output directory and records
/// the configuration in it.
fn start(g: &Global, resuming: bool, edit: impl FnOnce(&mut RunConfig)) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(g.config.as_deref(), g.preset)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(device) = &g.device {
        cfg.device = device.clone();
    }
    ensure!(cfg.device == "cpu", "device {:?} is not available, only \"cpu\" is supported", cfg.device);
    edit(&mut cfg);
    cfg.propagate_seed();
    let out = g.out.clone().context("--out is required")?;
    if out.exists() {
        let occupied = fs::read_dir(&out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        ensure!(
            !occupied || resuming,
            "output directory {} is not empty",
            out.display()
        );
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write(&out.join("run_config.toml"))?;
    Ok((cfg, out))
}

fn load_split(manifest: &Path, split: Split, cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::load_manifest(manifest)?;
    Ok(match split {
        Split::All => corpus,
        Split::Train => corpus.split(cfg.split.test_per_speaker)?.0,
        Split::Test => corpus.split(cfg.split.test_per_speaker)?.1,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parse_chain(specs: &[String]) -> Result<Vec<Transform>> {
    specs
        .iter()
        .flat_map(|s| s.split(','))
        .map(|s| s.trim().parse::<Transform>().map_err(Into::into))
        .collect()
}

/// Outcome of processing a manifest file by file.
struct FileBatch {
    /// `(manifest entry, output path)` of every file written.
    written: Vec<(String, PathBuf)>,
    root: PathBuf,
    total: usize,
}

impl FileBatch {
    /// Applies `f` to every manifest entry and writes the result under `out`
    /// at the same relative path. Failures are logged and skipped.
    fn run(manifest: &Path, out: &Path, mut f: impl FnMut(&str, &Waveform) -> Result<Waveform>) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut written = Vec::new();
        for entry in &entries {
            let result = (|| -> Result<PathBuf> {
                let rel = Path::new(entry);
                ensure!(
                    rel.components().all(|c| matches!(c, Component::Normal(_))),
                    "manifest entries must be relative paths without `..`"
                );
                let input = load_waveform(root.join(rel))?;
                let output = f(entry, &input)?;
                let path = out.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                save_waveform(&path, &output)?;
                Ok(path)
            })();
            match result {
                Ok(path) => written.push((entry.clone(), path)),
                Err(e) => tracing::error!("{entry}: {e:#}"),
            }
        }
        Ok(Self {
            written,
            root,
            total: entries.len(),
        })
    }

    /// Writes the output manifest and the input-to-output mapping.
    fn finish(self, out: &Path) -> Result<()> {
        let ids: Vec<&str> = self.written.iter().map(|(e, _)| e.as_str()).collect();
        write_manifest(&out.join("manifest.txt"), &ids)?;
        let mapping: String = self
            .written
            .iter()
            .map(|(e, p)| format!("{}\t{}\n", self.root.join(e).display(), p.display()))
            .collect();
        fs::write(out.join("mapping.tsv"), mapping).context("writing mapping.tsv")?;
        let failed = self.total - self.written.len();
        if failed > 0 {
            bail!("{failed} of {} files failed", self.total);
        }
        println!("wrote {} files to {}", self.written.len(), out.display());
        Ok(())
    }
}

pub fn make_toy_corpus(g: &Global, speakers: Option<usize>, utterances: Option<usize>, seconds: Option<f64>) -> Result<()> {
    let (cfg, out) = start(g, false, |c| {
        if let Some(v) = speakers {
            c.corpus.n_speakers = v;
        }
        if let Some(v) = utterances {
            c.corpus.utterances_per_speaker = v;
        }
        if let Some(v) = seconds {
            c.corpus.seconds = v;
        }
    })?;
    let corpus = synthesize_toy_corpus(&cfg.corpus)?;
    let manifest = corpus.save(&out)?;
    println!(
        "wrote {} utterances of {} speakers, manifest {}",
        corpus.len(),
        corpus.speakers().len(),
        manifest.display()
    );
    Ok(())
}

pub fn train_encoder(g: &Global, manifest: &Path, steps: Option<usize>) -> Result<()> {
    let (cfg, out) = start(g, false, |c| {
        if let Some(s) = steps {
            c.encoder.steps = s;
        }
    })?;
    let corpus = Corpus::load_manifest(manifest)?;
    let (train, test) = corpus.split(cfg.split.test_per_speaker)?;
    let analyzer = Analyzer::default();
    let (model, report) = train_reference_encoder(&train, &test, &analyzer, &cfg.encoder)?;
    model.freeze().save(&out.join("encoder.json"))?;
    write_json(&out.join("encoder_report.json"), &report)?;
    println!(
        "original-speech EER {:.4} over {} held-out trials",
        report.validation_eer, report.validation_trials
    );
    Ok(())
}

pub fn train_generator(
    g: &Global,
    encoder: &Path,
    manifest: &Path,
    ablation: Option<Ablation>,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    let (cfg, out) = start(g, resume.is_some(), |c| {
        if let Some(Ablation::NoBm) = ablation {
            c.training.loss_weights = LossWeights::without_batch_mean();
        }
        if let Some(s) = steps {
            c.training.total_steps = s;
        }
    })?;
    let encoder = EncoderModel::<f32>::load(encoder)?;
    let train = Corpus::load_manifest(manifest)?.split(cfg.split.test_per_speaker)?.0;
    let analyzer = Analyzer::default();
    let generator = PerturbationGenerator::new(cfg.generator.clone(), cfg.seed)?;
    let outcome = training::train_generator(&train, &encoder, &analyzer, generator, &cfg.training, &out, resume)?;
    let last = outcome.records.last();
    println!(
        "trained to step {}, final checkpoint {}",
        last.map_or(0, |r| r.step),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

pub fn anonymize(g: &Global, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let (_, out) = start(g, false, |_| {})?;
    let generator = PerturbationGenerator::<f32>::load(checkpoint)?;
    let analyzer = Analyzer::default();
    FileBatch::run(manifest, &out, |_, w| Ok(generator::anonymize(w, &generator, &analyzer.stft)?))?.finish(&out)
}

#[derive(Serialize)]
struct AttackFileReport {
    input: String,
    linf: f64,
    /// Bound after 16-bit PCM quantization of the written file.
    linf_written: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct AttackReport {
    method: AttackMethod,
    epsilon: f64,
    files: Vec<AttackFileReport>,
    max_linf: f64,
    max_linf_written: f64,
}

pub fn attack(g: &Global, method: AttackMethod, encoder: &Path, manifest: &Path) -> Result<()> {
    let (cfg, out) = start(g, false, |_| {})?;
    let attack_cfg = cfg.attack.for_method(method)?;
    attack_cfg.validate()?;
    let encoder = EncoderModel::<f32>::load(encoder)?;
    let analyzer = Analyzer::default();
    let model = AttackModel::new(&encoder, &analyzer)?;
    let mut files = Vec::new();
    let batch = FileBatch::run(manifest, &out, |entry, w| {
        let outcome = run_attack(method, w, &model, &cfg.attack)?;
        let linf = outcome.adversarial.max_abs_diff(w);
        ensure!(
            linf <= attack_cfg.epsilon + 1e-9,
            "perturbation {linf} exceeds epsilon {}",
            attack_cfg.epsilon
        );
        files.push(AttackFileReport {
            input: entry.to_string(),
            linf,
            linf_written: f64::NAN,
            final_loss: outcome.final_loss(),
        });
        Ok(outcome.adversarial)
    })?;
    for report in &mut files {
        if let Some((entry, path)) = batch.written.iter().find(|(e, _)| *e == report.input) {
            let original = load_waveform(batch.root.join(entry))?;
            report.linf_written = load_waveform(path)?.max_abs_diff(&original);
        }
    }
    let max = |f: fn(&AttackFileReport) -> f64| files.iter().map(f).fold(0.0, f64::max);
    let report = AttackReport {
        method,
        epsilon: attack_cfg.epsilon,
        max_linf: max(|r| r.linf),
        max_linf_written: max(|r| r.linf_written),
        files,
    };
    write_json(&out.join("attack_report.json"), &report)?;
    println!(
        "max |x~ - x| {:.6} in memory, {:.6} after writing (epsilon {})",
        report.max_linf, report.max_linf_written, report.epsilon
    );
    batch.finish(&out)
}

pub struct EvaluateArgs {
    pub protocol: Protocol,
    pub encoder: PathBuf,
    pub manifest: PathBuf,
    pub split: Split,
    pub trials: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub attack: Option<AttackMethod>,
    pub transforms: Vec<String>,
}

pub fn evaluate(g: &Global, args: EvaluateArgs) -> Result<()> {
    let (cfg, out) = start(g, false, |_| {})?;
    let chain = parse_chain(&args.transforms)?;
    if let Some(method) = args.attack {
        cfg.attack.for_method(method)?.validate()?;
    }
    let corpus = load_split(&args.manifest, args.split, &cfg)?;
    let trials = match &args.trials {
        Some(path) => read_trials(path, args.protocol)?,
        None => spkanon::evaluation::make_trials(&corpus, args.protocol, cfg.seed)?,
    };
    ensure!(
        trials.num_target() > 0 && trials.num_nontarget() > 0,
        "trial list needs both target and nontarget trials"
    );
    write_trials(&out.join("trials.txt"), &trials)?;
    let encoder = EncoderModel::<f32>::load(&args.encoder)?;
    let generator = args.generator.as_deref().map(PerturbationGenerator::<f32>::load).transpose()?;
    let analyzer = Analyzer::default();
    let attack_model = match args.attack {
        Some(_) => Some(AttackModel::new(&encoder, &analyzer)?),
        None => None,
    };
    if args.protocol == Protocol::Original && (generator.is_some() || args.attack.is_some() || !chain.is_empty()) {
        tracing::warn!("the original protocol scores unmodified audio; processing options are ignored");
    }
    let mut similarities = Vec::new();
    let mut process = |u: &Utterance| -> spkanon::Result<Waveform> {
        let mut w = u.waveform.clone();
        if let Some(gen) = &generator {
            w = generator::anonymize(&w, gen, &analyzer.stft)?;
        }
        if let (Some(method), Some(model)) = (args.attack, &attack_model) {
            w = run_attack(method, &w, model, &cfg.attack)?.adversarial;
        }
        w = Transform::apply_chain(&chain, &w)?;
        similarities.push(spectral_similarity(&u.waveform, &w, &analyzer)?);
        Ok(w)
    };
    let scores = score_trials(&trials, &corpus, &encoder, &analyzer, &mut process)?;
    let similarity = (!similarities.is_empty()).then(|| similarities.iter().sum::<f64>() / similarities.len() as f64);
    let report = EvaluationReport::new(&scores, similarity, chain.iter().map(|t| t.to_string()).collect())?;
    scores.write(&out.join("scores.txt"))?;
    write_json(&out.join("report.json"), &report)?;
    print!("{} EER {:.4} over {} trials", report.protocol, report.eer, report.n_target + report.n_nontarget);
    match report.spectral_similarity {
        Some(s) => println!(", spectral similarity {s:.4}"),
        None => println!(),
    }
    Ok(())
}

pub fn make_trials(g: &Global, protocol: Protocol, manifest: &Path, split: Split) -> Result<()> {
    let (cfg, out) = start(g, false, |_| {})?;
    let corpus = load_split(manifest, split, &cfg)?;
    let trials = spkanon::evaluation::make_trials(&corpus, protocol, cfg.seed)?;
    write_trials(&out.join("trials.txt"), &trials)?;
    println!(
        "{} trials: {} target, {} nontarget",
        protocol,
        trials.num_target(),
        trials.num_nontarget()
    );
    Ok(())
}

pub fn transform(g: &Global, manifest: &Path, specs: &[String]) -> Result<()> {
    let (_, out) = start(g, false, |_| {})?;
    let chain = parse_chain(specs)?;
    FileBatch::run(manifest, &out, |_, w| Ok(Transform::apply_chain(&chain, w)?))?.finish(&out)
}

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spkanon_autograd::Float;

use super::trials::{Protocol, Trial, TrialList};
use crate::corpus::{Corpus, Utterance};
use crate::encoder::{cosine_score, EncoderModel, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::signal::{Analyzer, Waveform};

/// Cosine scores of a trial list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub protocol: Protocol,
    pub scores: Vec<(Trial, f64)>,
}

impl ScoreSet {
    /// `(target scores, nontarget scores)`.
    pub fn split_scores(&self) -> (Vec<f64>, Vec<f64>) {
        let mut target = Vec::new();
        let mut nontarget = Vec::new();
        for (t, s) in &self.scores {
            if t.is_target {
                target.push(*s);
            } else {
                nontarget.push(*s);
            }
        }
        (target, nontarget)
    }

    /// Writes `<score> <enroll> <test>` lines with six decimals.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self
            .scores
            .iter()
            .map(|(t, s)| format!("{s:.6} {} {}\n", t.enroll, t.test))
            .collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Structured outcome of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub protocol: Protocol,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    pub target_mean: f64,
    pub nontarget_mean: f64,
    /// Mean spectral similarity between processed and original audio.
    pub spectral_similarity: Option<f64>,
    pub transforms: Vec<String>,
}

impl EvaluationReport {
    pub fn new(scores: &ScoreSet, spectral_similarity: Option<f64>, transforms: Vec<String>) -> Result<Self> {
        let (target, nontarget) = scores.split_scores();
        Ok(Self {
            protocol: scores.protocol,
            n_target: target.len(),
            n_nontarget: nontarget.len(),
            eer: super::eer(&target, &nontarget)?,
            target_mean: mean(&target),
            nontarget_mean: mean(&nontarget),
            spectral_similarity,
            transforms,
        })
    }
}

/// Scores every trial, embedding each utterance at most once per condition.
///
/// `process` turns an original utterance into the audio the protocol marks
/// as anonymized (anonymizer, attack, transforms, in any combination). It is
/// called at most once per utterance and never for the original protocol.
pub fn score_trials<F: Float>(
    trials: &TrialList,
    corpus: &Corpus,
    encoder: &EncoderModel<F>,
    analyzer: &Analyzer,
    process: &mut dyn FnMut(&Utterance) -> Result<Waveform>,
) -> Result<ScoreSet> {
    let mut cache: HashMap<(String, bool), SpeakerEmbedding> = HashMap::new();
    let mut embed = |id: &str, anonymized: bool| -> Result<SpeakerEmbedding> {
        let key = (id.to_string(), anonymized);
        if let Some(z) = cache.get(&key) {
            return Ok(z.clone());
        }
        let u = corpus
            .get(id)
            .ok_or_else(|| Error::Evaluation(format!("no audio for utterance {id}")))?;
        let z = if anonymized {
            encoder.embed(&analyzer.features(&process(u)?)?)?
        } else {
            encoder.embed(&analyzer.features(&u.waveform)?)?
        };
        cache.insert(key, z.clone());
        Ok(z)
    };
    let protocol = trials.protocol;
    let mut scores = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let a = embed(&t.enroll, protocol.enroll_anonymized())?;
        let b = embed(&t.test, protocol.test_anonymized())?;
        scores.push((t.clone(), cosine_score(&a, &b)?));
    }
    if scores.is_empty() {
        return Err(Error::Evaluation("empty trial list".into()));
    }
    Ok(ScoreSet { protocol, scores })
}

/// Mean frame cosine between the log filterbank features of two signals,
/// trimmed to their common length.
pub fn spectral_similarity(a: &Waveform, b: &Waveform, analyzer: &Analyzer) -> Result<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(Error::Evaluation("spectral similarity of empty overlap".into()));
    }
    let trim = |w: &Waveform| Waveform::from_clamped(w.samples()[..n].to_vec(), w.sample_rate());
    let fa = analyzer.features(&trim(a))?;
    let fb = analyzer.features(&trim(b))?;
    let total: f64 = fa
        .frames
        .rows()
        .into_iter()
        .zip(fb.frames.rows())
        .map(|(x, y)| {
            let dot = x.dot(&y);
            let den = x.dot(&x).sqrt() * y.dot(&y).sqrt();
            if den > 0.0 {
                dot / den
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / fa.num_frames() as f64)
}

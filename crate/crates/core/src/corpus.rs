//! Speaker-labelled utterance collections and a synthetic toy corpus.
//!
//! On disk a corpus is a manifest of newline-delimited WAV paths relative to
//! the manifest's directory. The speaker of each file is the name of its
//! parent directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{load_waveform, save_waveform, Waveform, SAMPLE_RATE};

/// One recording and the speaker who produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Manifest path, unique within a corpus.
    pub id: String,
    pub speaker: String,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Corpus(format!("duplicate utterance id {}", u.id)));
            }
        }
        Ok(Self { utterances })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Sorted distinct speaker names.
    pub fn speakers(&self) -> Vec<String> {
        self.by_speaker().into_keys().collect()
    }

    /// Utterance indices grouped by speaker, speakers in sorted order.
    pub fn by_speaker(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            map.entry(u.speaker.clone()).or_default().push(i);
        }
        map
    }

    /// Holds out the last `test_per_speaker` utterances of every speaker.
    pub fn split(&self, test_per_speaker: usize) -> Result<(Corpus, Corpus)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (speaker, idx) in self.by_speaker() {
            if idx.len() <= test_per_speaker {
                return Err(Error::Corpus(format!(
                    "speaker {speaker} has {} utterances, cannot hold out {test_per_speaker}",
                    idx.len()
                )));
            }
            let cut = idx.len() - test_per_speaker;
            train.extend(idx[..cut].iter().map(|&i| self.utterances[i].clone()));
            test.extend(idx[cut..].iter().map(|&i| self.utterances[i].clone()));
        }
        Ok((Corpus { utterances: train }, Corpus { utterances: test }))
    }

    /// Reads a manifest and every WAV it lists.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let mut utterances = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let speaker = Path::new(line)
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    Error::Corpus(format!("{line}: manifest entries need a speaker directory"))
                })?
                .to_string();
            utterances.push(Utterance {
                id: line.to_string(),
                speaker,
                waveform: load_waveform(root.join(line))?,
            });
        }
        Corpus::new(utterances)
    }

    /// Writes every utterance as `dir/<id>` plus `dir/manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for u in &self.utterances {
            let path = dir.join(&u.id);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_waveform(&path, &u.waveform)?;
        }
        let ids: Vec<&str> = self.utterances.iter().map(|u| u.id.as_str()).collect();
        write_manifest(&dir.join("manifest.txt"), &ids)
    }
}

/// Writes newline-delimited entries and returns the manifest path.
pub fn write_manifest(path: &Path, entries: &[&str]) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reads the non-empty lines of a manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Size and seed of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub seed: u64,
    /// Standard deviation of the stationary background noise added after
    /// peak normalization.
    pub noise_floor: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 16,
            seconds: 2.0,
            seed: 7,
            noise_floor: 5e-3,
        }
    }
}

/// Fixed vocal traits of a synthetic speaker.
#[derive(Debug, Clone)]
struct Voice {
    f0: f64,
    tract_scale: f64,
    /// One-pole low-pass coefficient shaping the glottal source.
    tilt: f64,
    breath: f64,
    /// An extra resonance unique to the speaker.
    timbre_hz: f64,
}

impl Voice {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            f0: rng.random_range(85.0..240.0),
            tract_scale: rng.random_range(0.82..1.22),
            tilt: rng.random_range(0.55..0.92),
            breath: rng.random_range(0.0..0.25),
            timbre_hz: rng.random_range(2400.0..4200.0),
        }
    }
}

/// Two-pole resonator with unit peak gain.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        Self {
            a1: 2.0 * r * (2.0 * PI * freq / fs).cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];

fn synthesize(voice: &Voice, samples: usize, noise_floor: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; samples];
    let mut phase = 0.0;
    let mut source_lp = 0.0;
    let mut env = 0.0;
    let mut timbre = Resonator::new(voice.timbre_hz, 250.0);
    let contour = rng.random_range(-0.15..0.15);
    let mut n = 0;
    while n < samples {
        let len = ((rng.random_range(0.08..0.22) * fs) as usize).min(samples - n);
        let kind = rng.random_range(0..10);
        let target = if kind == 0 { 0.0 } else { 1.0 };
        let fricative = kind == 1;
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let mut formants: Vec<Resonator> = vowel
            .iter()
            .zip([80.0, 110.0, 160.0])
            .map(|(&f, bw)| Resonator::new(f * voice.tract_scale, bw))
            .collect();
        let mut hiss = Resonator::new(rng.random_range(4500.0..6500.0), 1200.0);
        for i in n..n + len {
            env += 0.004 * (target - env);
            let progress = i as f64 / samples as f64;
            let f0 = voice.f0 * (1.0 + contour * (progress - 0.5));
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let breath = voice.breath * noise.sample(rng);
            source_lp = voice.tilt * source_lp + (1.0 - voice.tilt) * (pulse * 30.0 + breath);
            let sample = if fricative {
                hiss.tick(noise.sample(rng)) * 0.6
            } else {
                let voiced: f64 = formants
                    .iter_mut()
                    .zip([1.0, 0.7, 0.35])
                    .map(|(r, a)| a * r.tick(source_lp))
                    .sum();
                voiced + 0.5 * timbre.tick(source_lp)
            };
            out[i] = env * sample + 1e-4 * noise.sample(rng);
        }
        n += len;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    out.iter_mut()
        .for_each(|v| *v = *v * 0.5 / peak + noise_floor * noise.sample(rng));
    out
}

/// Generates a corpus of formant-synthesized speakers.
///
/// Ids are `spkNN/uttNNN.wav`, so saving and reloading the corpus yields the
/// same ids and speaker names.
pub fn synthesize_toy_corpus(cfg: &ToyCorpusConfig) -> Result<Corpus> {
    if cfg.n_speakers == 0 || cfg.utterances_per_speaker == 0 {
        return Err(Error::InvalidConfig("toy corpus must be nonempty".into()));
    }
    if !(cfg.noise_floor >= 0.0 && cfg.noise_floor < 0.1) {
        return Err(Error::InvalidConfig("noise floor must lie in [0, 0.1)".into()));
    }
    if !(cfg.seconds >= 0.1) {
        return Err(Error::InvalidConfig("toy utterances need at least 0.1 s".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (cfg.seconds * SAMPLE_RATE as f64) as usize;
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for s in 0..cfg.n_speakers {
        let voice = Voice::sample(&mut rng);
        for u in 0..cfg.utterances_per_speaker {
            let speaker = format!("spk{s:02}");
            utterances.push(Utterance {
                id: format!("{speaker}/utt{u:03}.wav"),
                speaker,
                waveform: Waveform::from_clamped(synthesize(&voice, samples, cfg.noise_floor, &mut rng), SAMPLE_RATE),
            });
        }
    }
    Corpus::new(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyCorpusConfig {
        ToyCorpusConfig {
            n_speakers: 3,
            utterances_per_speaker: 3,
            seconds: 0.3,
            seed: 1,
            ..ToyCorpusConfig::default()
        }
    }

    #[test]
    fn toy_corpus_is_seeded() {
        let a = synthesize_toy_corpus(&tiny()).unwrap();
        let b = synthesize_toy_corpus(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
        assert_eq!(a.speakers(), vec!["spk00", "spk01", "spk02"]);
        for u in a.utterances() {
            assert_eq!(u.waveform.len(), 4800);
            let peak = u.waveform.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn split_holds_out_per_speaker() {
        let c = synthesize_toy_corpus(&tiny()).unwrap();
        let (train, test) = c.split(1).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 3);
        assert_eq!(test.speakers(), c.speakers());
        assert!(c.split(3).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = synthesize_toy_corpus(&tiny()).unwrap();
        let manifest = c.save(dir.path()).unwrap();
        let back = Corpus::load_manifest(&manifest).unwrap();
        assert_eq!(back.len(), c.len());
        for (a, b) in back.utterances().iter().zip(c.utterances()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.speaker, b.speaker);
            assert!(a.waveform.max_abs_diff(&b.waveform) <= 1.0 / 32768.0);
        }
        assert_eq!(read_manifest(&manifest).unwrap().len(), 9);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let c = synthesize_toy_corpus(&tiny()).unwrap();
        let mut u = c.utterances().to_vec();
        u.push(u[0].clone());
        assert!(Corpus::new(u).is_err());
    }
}

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Which side of a trial is anonymized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Both sides are unmodified recordings.
    Original,
    /// Original enrollment, anonymized test.
    DeId,
    /// Anonymized enrollment and test.
    Unlinkability,
}

impl Protocol {
    pub fn enroll_anonymized(self) -> bool {
        self == Protocol::Unlinkability
    }

    pub fn test_anonymized(self) -> bool {
        self != Protocol::Original
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Original => "original",
            Protocol::DeId => "de-id",
            Protocol::Unlinkability => "unlinkability",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Protocol::Original),
            "de-id" => Ok(Protocol::DeId),
            "unlinkability" => Ok(Protocol::Unlinkability),
            other => Err(Error::InvalidConfig(format!(
                "unknown protocol {other:?} (expected original, de-id or unlinkability)"
            ))),
        }
    }
}

/// An enrollment/test pair of utterance ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialList {
    pub protocol: Protocol,
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn num_target(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn num_nontarget(&self) -> usize {
        self.trials.len() - self.num_target()
    }
}

/// Balanced trials over every ordered pair of distinct utterances.
///
/// The larger of the target and nontarget classes is subsampled with a seeded
/// shuffle down to the size of the smaller one; the survivors keep their
/// enumeration order.
pub fn make_trials(split: &Corpus, protocol: Protocol, seed: u64) -> Result<TrialList> {
    if split.speakers().len() < 2 {
        return Err(Error::Evaluation(
            "trials need at least two speakers in the split".into(),
        ));
    }
    let utts = split.utterances();
    let mut target = Vec::new();
    let mut nontarget = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        for (j, v) in utts.iter().enumerate() {
            if i == j {
                continue;
            }
            let trial = Trial {
                enroll: u.id.clone(),
                test: v.id.clone(),
                is_target: u.speaker == v.speaker,
            };
            if trial.is_target {
                target.push((i * utts.len() + j, trial));
            } else {
                nontarget.push((i * utts.len() + j, trial));
            }
        }
    }
    if target.is_empty() {
        return Err(Error::Evaluation(
            "no target trials: every speaker has a single utterance".into(),
        ));
    }
    let keep = target.len().min(nontarget.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [&mut target, &mut nontarget] {
        if class.len() > keep {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }
    let mut all: Vec<_> = target.into_iter().chain(nontarget).collect();
    all.sort_by_key(|(order, _)| *order);
    Ok(TrialList {
        protocol,
        trials: all.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Writes `<target|nontarget> <enroll> <test>` lines.
pub fn write_trials(path: &Path, list: &TrialList) -> Result<()> {
    let mut text = String::new();
    for t in &list.trials {
        let label = if t.is_target { "target" } else { "nontarget" };
        text.push_str(&format!("{label} {} {}\n", t.enroll, t.test));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: &Path, protocol: Protocol) -> Result<TrialList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Evaluation(format!("{}:{}: malformed trial {line:?}", path.display(), n + 1));
        let [label, enroll, test] = fields[..] else {
            return Err(bad());
        };
        let is_target = match label {
            "target" => true,
            "nontarget" => false,
            _ => return Err(bad()),
        };
        trials.push(Trial {
            enroll: enroll.to_string(),
            test: test.to_string(),
            is_target,
        });
    }
    Ok(TrialList { protocol, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::signal::{Waveform, SAMPLE_RATE};

    fn corpus(speakers: usize, per: usize) -> Corpus {
        let mut utts = Vec::new();
        for s in 0..speakers {
            for u in 0..per {
                utts.push(Utterance {
                    id: format!("s{s}/u{u}.wav"),
                    speaker: format!("s{s}"),
                    waveform: Waveform::zeros(800, SAMPLE_RATE),
                });
            }
        }
        Corpus::new(utts).unwrap()
    }

    #[test]
    fn two_by_two_gives_four_and_four() {
        let list = make_trials(&corpus(2, 2), Protocol::DeId, 0).unwrap();
        assert_eq!(list.num_target(), 4);
        assert_eq!(list.num_nontarget(), 4);
        assert!(list.trials.iter().all(|t| t.enroll != t.test));
    }

    #[test]
    fn seeded_and_balanced() {
        let c = corpus(4, 3);
        let a = make_trials(&c, Protocol::Unlinkability, 3).unwrap();
        let b = make_trials(&c, Protocol::Unlinkability, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_target(), 4 * 3 * 2);
        assert_eq!(a.num_target(), a.num_nontarget());
        let other = make_trials(&c, Protocol::Unlinkability, 4).unwrap();
        assert_ne!(a.trials, other.trials);
    }

    #[test]
    fn single_speaker_is_rejected() {
        assert!(make_trials(&corpus(1, 3), Protocol::Original, 0).is_err());
        assert!(make_trials(&corpus(3, 1), Protocol::Original, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        let list = make_trials(&corpus(3, 2), Protocol::DeId, 1).unwrap();
        write_trials(&path, &list).unwrap();
        assert_eq!(read_trials(&path, Protocol::DeId).unwrap(), list);
        fs::write(&path, "maybe a b\n").unwrap();
        assert!(read_trials(&path, Protocol::DeId).is_err());
    }

    #[test]
    fn protocol_names() {
        for p in [Protocol::Original, Protocol::DeId, Protocol::Unlinkability] {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("both".parse::<Protocol>().is_err());
    }
}

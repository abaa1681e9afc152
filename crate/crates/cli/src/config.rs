//! Run configuration: preset defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use spkanon::attacks::AttackConfig;
use spkanon::corpus::ToyCorpusConfig;
use spkanon::encoder::EncoderTrainConfig;
use spkanon::generator::GeneratorConfig;
use spkanon::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small generator and short schedule for a single CPU core.
    Desk,
    /// Full-size generator and the long training schedule.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Utterances per speaker held out for evaluation.
    pub test_per_speaker: usize,
}

/// Every parameter a command can use, fully resolved before it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub device: String,
    pub split: SplitConfig,
    pub corpus: ToyCorpusConfig,
    pub encoder: EncoderTrainConfig,
    pub generator: GeneratorConfig,
    pub training: TrainConfig,
    pub attack: AttackConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (generator, training) = match preset {
            Preset::Desk => (GeneratorConfig::desk(), TrainConfig::desk()),
            Preset::Full => (GeneratorConfig::default(), TrainConfig::default()),
        };
        Self {
            preset,
            seed: 0,
            device: "cpu".into(),
            split: SplitConfig { test_per_speaker: 3 },
            corpus: ToyCorpusConfig::default(),
            encoder: EncoderTrainConfig::default(),
            generator,
            training,
            attack: AttackConfig::default(),
        }
    }

    /// Preset defaults overlaid with `file`, key by key.
    ///
    /// The preset comes from the flag if given, else from the file, else desk.
    pub fn load(file: Option<&Path>, preset_flag: Option<Preset>) -> Result<Self> {
        let overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
                Some(table)
            }
            None => None,
        };
        let file_preset = match overlay.as_ref().and_then(|t| t.get("preset")) {
            Some(v) => Some(v.clone().try_into::<Preset>().context("unknown preset in config file")?),
            None => None,
        };
        let preset = preset_flag.or(file_preset).unwrap_or(Preset::Desk);
        let mut merged = toml::Value::try_from(Self::preset(preset)).context("serializing defaults")?;
        if let Some(table) = overlay {
            merge(&mut merged, toml::Value::Table(table));
        }
        let mut cfg: RunConfig = merged
            .try_into()
            .with_context(|| format!("invalid configuration in {}", file.map_or("<defaults>".into(), |p| p.display().to_string())))?;
        cfg.preset = preset;
        Ok(cfg)
    }

    /// Copies the top-level seed into every section that draws random numbers.
    pub fn propagate_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.encoder.seed = self.seed;
        self.training.seed = self.seed;
        self.attack.seed = self.seed;
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing run configuration")?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Recursive table merge; non-table values in `overlay` replace `base`.
fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_single_keys() {
        let dir = std::env::temp_dir().join(format!("spkanon-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        fs::write(&path, "seed = 9\n[training]\ntotal_steps = 7\n[training.loss_weights]\ngamma = 0.0\nbeta = 0.5\nalpha = 0.5\n").unwrap();
        let cfg = RunConfig::load(Some(&path), None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.total_steps, 7);
        assert_eq!(cfg.training.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(cfg.training.loss_weights.gamma, 0.0);
        fs::write(&path, "[training]\ntotal_stpes = 7\n").unwrap();
        assert!(RunConfig::load(Some(&path), None).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn presets_differ_in_model_size() {
        let desk = RunConfig::preset(Preset::Desk);
        let full = RunConfig::preset(Preset::Full);
        assert!(desk.generator.model_dim < full.generator.model_dim);
        assert_eq!(full.training.warmup_steps, 9600);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = RunConfig::preset(Preset::Full);
        cfg.seed = 3;
        cfg.propagate_seed();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.attack.seed, 3);
    }
}

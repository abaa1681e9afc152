use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{Spectrogram, StftConfig};
use crate::error::{Error, Result};

/// Log mel filterbank settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Floor applied to filter energies before the logarithm.
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be positive".into()));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= f_min ({}) < f_max ({}) <= {nyquist}",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the retained STFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_bins × n_mels`, so features are `power · weights`.
    weights: Array2<f64>,
    log_floor: f64,
}

impl MelFilterbank {
    pub fn new(fbank: &FbankConfig, stft: &StftConfig, sample_rate: u32) -> Result<Self> {
        fbank.validate(sample_rate)?;
        stft.validate()?;
        let (lo, hi) = (hz_to_mel(fbank.f_min), hz_to_mel(fbank.f_max));
        let edges: Vec<f64> = (0..fbank.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (fbank.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / stft.fft_size as f64;
        let mut weights = Array2::zeros((stft.n_bins, fbank.n_mels));
        for m in 0..fbank.n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..stft.n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - left) / (centre - left);
                let down = (right - f) / (right - centre);
                weights[[k, m]] = up.min(down).max(0.0);
            }
        }
        Ok(Self {
            weights,
            log_floor: fbank.log_floor,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }

    pub fn n_mels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.nrows()
    }

    /// `log(max(power · M, floor))` for a `T × n_bins` power matrix.
    pub fn apply_power(&self, power: &Array2<f64>) -> Result<FeatureFrames> {
        if power.ncols() != self.n_bins() {
            return Err(Error::Shape(format!(
                "power has {} bins, filterbank expects {}",
                power.ncols(),
                self.n_bins()
            )));
        }
        let floor = self.log_floor;
        let frames = power.dot(&self.weights).mapv(|e| e.max(floor).ln());
        Ok(FeatureFrames { frames })
    }

    /// Features of a magnitude matrix (squared before filtering).
    pub fn apply_magnitude(&self, magnitude: &Array2<f64>) -> Result<FeatureFrames> {
        self.apply_power(&magnitude.mapv(|m| m * m))
    }
}

/// Per-frame log filterbank vectors, `T × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    pub frames: Array2<f64>,
}

impl FeatureFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Log mel filterbank features of a spectrogram's magnitude.
pub fn log_filterbank(s: &Spectrogram, mel: &MelFilterbank) -> Result<FeatureFrames> {
    if s.magnitude.iter().any(|&m| m < 0.0) {
        return Err(Error::Shape("magnitude must be nonnegative".into()));
    }
    mel.apply_magnitude(&s.magnitude)
}

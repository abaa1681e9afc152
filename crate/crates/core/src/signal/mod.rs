//! Waveform I/O, STFT analysis/synthesis and log mel filterbank features.
//!
//! Everything here is a pure function of its inputs. Spectral processing
//! runs in `f64`; the differentiable front ends in [`frontend`] mirror the
//! same arithmetic on an autodiff tape for the model code.

pub mod fbank;
pub mod frontend;
pub mod stft;
pub mod wav;

pub use frontend::{FeatureFrontend, WaveformFrontend};
pub use fbank::{log_filterbank, FbankConfig, FeatureFrames, MelFilterbank};
pub use stft::{clamp_magnitude, istft, stft, Spectrogram, StftConfig, WindowKind};
pub use wav::{load_waveform, save_waveform, Waveform, SAMPLE_RATE};

use crate::error::Result;

/// STFT geometry plus filterbank, the analysis chain every model shares.
#[derive(Debug, Clone)]
pub struct Analyzer {
    pub stft: StftConfig,
    pub mel: MelFilterbank,
}

impl Analyzer {
    pub fn new(stft: &StftConfig, fbank: &FbankConfig) -> Result<Self> {
        Ok(Self {
            stft: stft.clone(),
            mel: MelFilterbank::new(fbank, stft, SAMPLE_RATE)?,
        })
    }

    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        stft(w, &self.stft)
    }

    pub fn features(&self, w: &Waveform) -> Result<FeatureFrames> {
        log_filterbank(&self.spectrogram(w)?, &self.mel)
    }

    pub fn synthesize(&self, s: &Spectrogram) -> Result<Waveform> {
        istft(s, &self.stft)
    }
}

impl Default for Analyzer {
    fn default() -> Self {
        Self::new(&StftConfig::default(), &FbankConfig::default())
            .expect("default analysis configuration is valid")
    }
}

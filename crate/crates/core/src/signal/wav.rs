use std::path::Path;

use crate::error::{Error, Result};

/// The only sample rate the toolkit accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Rejects non-finite or out-of-range samples and a zero sample rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some((i, x)) = samples
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite() || x.abs() > 1.0)
        {
            return Err(Error::InvalidWaveform(format!(
                "sample {i} = {x} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Clamps into `[-1, 1]`; non-finite samples become 0.
    pub fn from_clamped(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        let samples = samples
            .into_iter()
            .map(|x| if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::from_clamped(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// True when every sample is exactly zero.
    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|v| *v == 0.0)
    }

    /// `max |a - b|` over the common prefix.
    pub fn max_abs_diff(&self, other: &Waveform) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Reads a 16-bit PCM mono WAV at 16 kHz.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::UnsupportedAudio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels; only mono input is accepted",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples; only 16-bit PCM is accepted",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "sample rate {} Hz; only {SAMPLE_RATE} Hz is accepted",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, rounding to the nearest code.
pub fn save_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::UnsupportedAudio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &x in w.samples() {
        let code = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(code).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

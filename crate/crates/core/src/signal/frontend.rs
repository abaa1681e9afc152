//! Differentiable counterparts of the spectral front end.
//!
//! [`FeatureFrontend`] maps magnitudes to log filterbank features on a tape;
//! [`WaveformFrontend`] goes all the way from samples, expressing the
//! windowed DFT as two matrix products so gradients reach the waveform.

use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::Array2;
use spkanon_autograd::{cast, Float, Var};

use super::fbank::MelFilterbank;
use super::stft::StftConfig;
use crate::error::{Error, Result};

/// Magnitude or power → log filterbank, on a tape.
#[derive(Debug, Clone)]
pub struct FeatureFrontend<F: Float> {
    weights: Array2<F>,
    floor: F,
}

impl<F: Float> FeatureFrontend<F> {
    pub fn new(mel: &MelFilterbank) -> Self {
        Self {
            weights: mel.weights().mapv(cast),
            floor: cast(mel.log_floor()),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.weights.nrows()
    }

    /// `ln(max(power · M, floor))`.
    pub fn from_power<'t>(&self, power: Var<'t, F>) -> Var<'t, F> {
        let m = power.tape().constant(self.weights.clone());
        power.matmul(m).clamp_min(self.floor).ln()
    }

    pub fn from_magnitude<'t>(&self, magnitude: Var<'t, F>) -> Var<'t, F> {
        self.from_power(magnitude.square())
    }
}

/// Samples → STFT power → log filterbank, on a tape.
#[derive(Debug, Clone)]
pub struct WaveformFrontend<F: Float> {
    cfg: StftConfig,
    cos: Array2<F>,
    sin: Array2<F>,
    features: FeatureFrontend<F>,
}

impl<F: Float> WaveformFrontend<F> {
    pub fn new(cfg: &StftConfig, mel: &MelFilterbank) -> Result<Self> {
        cfg.validate()?;
        if mel.n_bins() != cfg.n_bins {
            return Err(Error::Shape(format!(
                "filterbank expects {} bins, STFT keeps {}",
                mel.n_bins(),
                cfg.n_bins
            )));
        }
        let window = cfg.window_samples();
        let offset = cfg.window_offset();
        let n_fft = cfg.fft_size as f64;
        let basis = |trig: fn(f64) -> f64| {
            Array2::from_shape_fn((cfg.win_length, cfg.n_bins), |(n, k)| {
                let angle = 2.0 * PI * k as f64 * (n + offset) as f64 / n_fft;
                cast(window[n] * trig(angle))
            })
        };
        Ok(Self {
            cfg: cfg.clone(),
            cos: basis(f64::cos),
            sin: basis(f64::sin),
            features: FeatureFrontend::new(mel),
        })
    }

    /// Reflect-padded centered frames as gather indices, `T × win_length`.
    fn frame_index(&self, len: usize) -> Rc<Vec<usize>> {
        let frames = self.cfg.num_frames(len);
        let offset = self.cfg.window_offset();
        let mut idx = Vec::with_capacity(frames * self.cfg.win_length);
        for t in 0..frames {
            let start = t * self.cfg.hop_length + offset;
            for n in 0..self.cfg.win_length {
                idx.push(self.cfg.reflect(start + n, len));
            }
        }
        Rc::new(idx)
    }

    /// STFT power of a `1 × N` waveform row, `T × n_bins`.
    pub fn power<'t>(&self, wave: Var<'t, F>) -> Result<Var<'t, F>> {
        let (rows, len) = wave.shape();
        if rows != 1 {
            return Err(Error::Shape(format!("waveform must be 1 x N, got {rows} rows")));
        }
        if len < self.cfg.win_length {
            return Err(Error::TooShort {
                len,
                min: self.cfg.win_length,
            });
        }
        let frames = wave.gather(
            self.cfg.num_frames(len),
            self.cfg.win_length,
            self.frame_index(len),
        );
        let tape = wave.tape();
        let re = frames.matmul(tape.constant(self.cos.clone()));
        let im = frames.matmul(tape.constant(self.sin.clone()));
        Ok(re.square().add(im.square()))
    }

    /// Log filterbank features of a `1 × N` waveform row.
    pub fn features<'t>(&self, wave: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(self.features.from_power(self.power(wave)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{log_filterbank, stft, FbankConfig, Waveform, SAMPLE_RATE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use spkanon_autograd::Tape;

    #[test]
    fn matches_the_fft_path() {
        let cfg = StftConfig::default();
        let mel = MelFilterbank::new(&FbankConfig::default(), &cfg, SAMPLE_RATE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3203).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let feats = log_filterbank(&spec, &mel).unwrap();

        let front = WaveformFrontend::<f64>::new(&cfg, &mel).unwrap();
        let tape = Tape::new();
        let row = tape.constant(Array2::from_shape_vec((1, x.len()), x).unwrap());
        let power = front.power(row).unwrap().value();
        let expected = spec.magnitude.mapv(|m| m * m);
        assert_eq!(power.dim(), expected.dim());
        for (a, b) in power.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let f = front.features(row).unwrap().value();
        for (a, b) in f.iter().zip(feats.frames.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_short_or_malformed_input() {
        let cfg = StftConfig::default();
        let mel = MelFilterbank::new(&FbankConfig::default(), &cfg, SAMPLE_RATE).unwrap();
        let front = WaveformFrontend::<f64>::new(&cfg, &mel).unwrap();
        let tape = Tape::new();
        assert!(front.power(tape.constant(Array2::zeros((1, 100)))).is_err());
        assert!(front.power(tape.constant(Array2::zeros((2, 1000)))).is_err());
    }
}

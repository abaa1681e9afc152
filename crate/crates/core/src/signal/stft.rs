use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wav::Waveform;
use crate::error::{Error, Result};

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2πn/N)`.
    HannPeriodic,
}

/// STFT geometry. Frames are centered with reflect padding of `fft_size/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    /// Retained low-frequency bins; the rest travel in [`Spectrogram::high_bins`].
    pub n_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            win_length: 400,
            hop_length: 160,
            window: WindowKind::HannPeriodic,
            n_bins: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return bad(format!(
                "hop_length {} must be in 1..=win_length ({})",
                self.hop_length, self.win_length
            ));
        }
        if self.win_length > self.fft_size {
            return bad(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            ));
        }
        if self.fft_size % 2 != 0 {
            return bad(format!("fft_size {} must be even", self.fft_size));
        }
        if self.n_bins == 0 || self.n_bins > self.full_bins() {
            return bad(format!(
                "n_bins {} must be in 1..={}",
                self.n_bins,
                self.full_bins()
            ));
        }
        // Overlap-add normalization divides by the summed squared window, so
        // it must stay away from zero at every steady-state position.
        let w = self.window_samples();
        let floor = (0..self.hop_length)
            .map(|phase| {
                (phase..self.win_length)
                    .step_by(self.hop_length)
                    .map(|n| w[n] * w[n])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if floor < 1e-6 {
            return bad(format!(
                "window does not overlap-add to a nonzero envelope at hop {}",
                self.hop_length
            ));
        }
        Ok(())
    }

    /// `fft_size / 2 + 1`.
    pub fn full_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Offset of the window inside an `fft_size` frame.
    pub fn window_offset(&self) -> usize {
        (self.fft_size - self.win_length) / 2
    }

    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        match self.window {
            WindowKind::HannPeriodic => (0..self.win_length)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }

    /// Frame count for a signal of `len` samples: `ceil(len / hop)`.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length)
    }

    /// Padded-signal index → source index under reflect padding.
    pub(crate) fn reflect(&self, padded: usize, len: usize) -> usize {
        let pad = self.fft_size / 2;
        let i = padded as isize - pad as isize;
        let n = len as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        debug_assert!((0..n).contains(&r));
        r as usize
    }
}

/// Magnitude/phase pair over the retained bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `T × n_bins`, nonnegative.
    pub magnitude: Array2<f64>,
    /// `T × n_bins`, radians.
    pub phase: Array2<f64>,
    /// Complex coefficients of the bins above `n_bins`, `T × (full - n_bins)`.
    /// `None` means they are zero-filled at synthesis.
    pub high_bins: Option<Array2<Complex64>>,
    /// Length of the analysed signal, used to trim the synthesis output.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.magnitude.nrows()
    }

    /// Replaces the magnitude, keeping phase and the high bins.
    pub fn with_magnitude(&self, magnitude: Array2<f64>) -> Result<Spectrogram> {
        if magnitude.dim() != self.magnitude.dim() {
            return Err(Error::Shape(format!(
                "magnitude {:?} does not match spectrogram {:?}",
                magnitude.dim(),
                self.magnitude.dim()
            )));
        }
        Ok(Spectrogram {
            magnitude,
            phase: self.phase.clone(),
            high_bins: self.high_bins.clone(),
            num_samples: self.num_samples,
        })
    }
}

/// Centered, reflect-padded STFT truncated to `cfg.n_bins`.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let x = w.samples();
    if x.len() < cfg.win_length {
        return Err(Error::TooShort {
            len: x.len(),
            min: cfg.win_length,
        });
    }
    let frames = cfg.num_frames(x.len());
    let full = cfg.full_bins();
    let window = cfg.window_samples();
    let offset = cfg.window_offset();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);

    let mut magnitude = Array2::zeros((frames, cfg.n_bins));
    let mut phase = Array2::zeros((frames, cfg.n_bins));
    let mut high = (cfg.n_bins < full).then(|| Array2::zeros((frames, full - cfg.n_bins)));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        buf.fill(Complex64::new(0.0, 0.0));
        let start = t * cfg.hop_length;
        for (n, &wn) in window.iter().enumerate() {
            let src = cfg.reflect(start + offset + n, x.len());
            buf[offset + n] = Complex64::new(x[src] * wn, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..cfg.n_bins {
            magnitude[[t, k]] = buf[k].norm();
            phase[[t, k]] = buf[k].arg();
        }
        if let Some(high) = high.as_mut() {
            for k in cfg.n_bins..full {
                high[[t, k - cfg.n_bins]] = buf[k];
            }
        }
    }
    Ok(Spectrogram {
        magnitude,
        phase,
        high_bins: high,
        num_samples: x.len(),
    })
}

/// Weighted overlap-add synthesis. Output is trimmed to the analysed length
/// and clamped to `[-1, 1]`.
pub fn istft(s: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    let (frames, bins) = s.magnitude.dim();
    if bins != cfg.n_bins || s.phase.dim() != s.magnitude.dim() {
        return Err(Error::Shape(format!(
            "spectrogram magnitude {:?} / phase {:?} do not match n_bins {}",
            s.magnitude.dim(),
            s.phase.dim(),
            cfg.n_bins
        )));
    }
    let full = cfg.full_bins();
    if let Some(high) = &s.high_bins {
        if high.dim() != (frames, full - bins) {
            return Err(Error::Shape(format!(
                "high bins {:?} do not match ({frames}, {})",
                high.dim(),
                full - bins
            )));
        }
    }
    if frames == 0 || cfg.num_frames(s.num_samples) != frames {
        return Err(Error::Shape(format!(
            "{frames} frames cannot describe {} samples",
            s.num_samples
        )));
    }
    let n_fft = cfg.fft_size;
    let window = cfg.window_samples();
    let offset = cfg.window_offset();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let span = (frames - 1) * cfg.hop_length + n_fft;
    let mut acc = vec![0.0; span];
    let mut envelope = vec![0.0; span];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        buf.fill(Complex64::new(0.0, 0.0));
        for k in 0..bins {
            buf[k] = Complex64::from_polar(s.magnitude[[t, k]], s.phase[[t, k]]);
        }
        if let Some(high) = &s.high_bins {
            for k in bins..full {
                buf[k] = high[[t, k - bins]];
            }
        }
        buf[n_fft / 2].im = 0.0;
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_length + offset;
        for (n, &wn) in window.iter().enumerate() {
            acc[start + n] += buf[offset + n].re / n_fft as f64 * wn;
            envelope[start + n] += wn * wn;
        }
    }
    let pad = n_fft / 2;
    let out = (0..s.num_samples)
        .map(|i| {
            let e = envelope[i + pad];
            if e > 1e-11 {
                acc[i + pad] / e
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::from_clamped(out, super::SAMPLE_RATE))
}

/// Entrywise `max(m, 0)`.
pub fn clamp_magnitude(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, len: usize, amp: f64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-amp..amp)).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = StftConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.full_bins(), 257);
        assert_eq!(cfg.num_frames(16_000), 100);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = StftConfig::default();
        for cfg in [
            StftConfig { hop_length: 500, ..base.clone() },
            StftConfig { win_length: 600, ..base.clone() },
            StftConfig { n_bins: 300, ..base.clone() },
            StftConfig { hop_length: 0, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn bin_centre_sinusoid_concentrates_energy() {
        let cfg = StftConfig::default();
        let bin = 40usize;
        let f = bin as f64 * SAMPLE_RATE as f64 / cfg.fft_size as f64;
        let x: Vec<f64> = (0..16_000)
            .map(|n| 0.5 * (2.0 * PI * f * n as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let s = stft(&Waveform::new(x, SAMPLE_RATE).unwrap(), &cfg).unwrap();
        // A Hann main lobe spans +-2 bins, so the energy test covers the lobe
        // around the peak bin.
        for t in 2..s.num_frames() - 2 {
            let row = s.magnitude.row(t);
            let total: f64 = row.iter().map(|m| m * m).sum();
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(argmax, bin);
            let lobe: f64 = (bin - 2..=bin + 2).map(|k| row[k] * row[k]).sum();
            assert!(lobe / total >= 0.9, "frame {t}: {}", lobe / total);
        }
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let s = stft(&Waveform::zeros(4000, SAMPLE_RATE), &StftConfig::default()).unwrap();
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        let err = stft(&Waveform::zeros(399, SAMPLE_RATE), &StftConfig::default());
        assert!(matches!(err, Err(Error::TooShort { len: 399, min: 400 })));
    }

    #[test]
    fn round_trip_is_exact_to_rounding() {
        let cfg = StftConfig::default();
        for seed in 0..4 {
            let x = noise(seed, 8000 + 37 * seed as usize, 0.9);
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(x.max_abs_diff(&y) < 1e-9);
        }
    }

    #[test]
    fn zero_magnitude_synthesizes_silence() {
        let cfg = StftConfig::default();
        let mut s = stft(&noise(9, 4000, 0.5), &cfg).unwrap();
        s.magnitude.fill(0.0);
        s.high_bins = None;
        let y = istft(&s, &cfg).unwrap();
        assert!(y.samples().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn doubling_magnitude_doubles_a_band_limited_signal() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..8000)
            .map(|n| {
                let t = n as f64 / SAMPLE_RATE as f64;
                0.05 * (2.0 * PI * 220.0 * t).sin() + 0.03 * (2.0 * PI * 1330.0 * t + 0.4).cos()
            })
            .collect();
        let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let doubled = s.with_magnitude(s.magnitude.mapv(|m| 2.0 * m)).unwrap();
        let y = istft(&doubled, &cfg).unwrap();
        // reflect padding makes the signal edges broadband; compare the interior
        let edge = cfg.win_length;
        for (a, b) in x.iter().zip(y.samples()).skip(edge).take(x.len() - 2 * edge) {
            assert!((2.0 * a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = StftConfig::default();
        let mut s = stft(&noise(1, 4000, 0.5), &cfg).unwrap();
        s.phase = Array2::zeros((3, 3));
        assert!(matches!(istft(&s, &cfg), Err(Error::Shape(_))));
        let s = stft(&noise(1, 4000, 0.5), &cfg).unwrap();
        assert!(s.with_magnitude(Array2::zeros((1, 256))).is_err());
    }

    #[test]
    fn clamp_examples() {
        let m = ndarray::arr2(&[[0.5, -0.1]]);
        assert_eq!(clamp_magnitude(&m), ndarray::arr2(&[[0.5, 0.0]]));
        let p = ndarray::arr2(&[[0.0, 2.0], [1.0, 3.5]]);
        assert_eq!(clamp_magnitude(&p), p);
    }

    #[test]
    fn clamp_gradient_by_finite_differences() {
        let h = 1e-6;
        for &m in &[0.7, 0.01, -0.02, -3.0] {
            let f = |v: f64| clamp_magnitude(&ndarray::arr2(&[[v]]))[[0, 0]];
            let slope = (f(m + h) - f(m - h)) / (2.0 * h);
            let expected = if m > 0.0 { 1.0 } else { 0.0 };
            assert!((slope - expected).abs() < 1e-9);
        }
    }
}

use std::f64::consts::PI;
use std::fmt;
use std::process::Command;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::signal::{load_waveform, save_waveform, Waveform};

/// Stopband attenuation the low-pass design targets.
pub const LOW_PASS_ATTENUATION_DB: f64 = 60.0;

/// Replaces each sample with the median of a `kernel`-wide window.
///
/// Edges repeat the boundary sample in mirror order, so the sample just
/// before index 0 is `x[0]`, then `x[1]`, and so on.
pub fn median_smooth(w: &Waveform, kernel: usize) -> Result<Waveform> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "median kernel must be odd and positive, got {kernel}"
        )));
    }
    let x = w.samples();
    if x.is_empty() {
        return Ok(w.clone());
    }
    let n = x.len() as isize;
    let half = (kernel / 2) as isize;
    let at = |i: isize| -> f64 {
        // symmetric extension with period 2n
        let mut i = i.rem_euclid(2 * n);
        if i >= n {
            i = 2 * n - 1 - i;
        }
        x[i as usize]
    };
    let mut window = vec![0.0; kernel];
    let out = (0..n)
        .map(|t| {
            for (k, slot) in window.iter_mut().enumerate() {
                *slot = at(t + k as isize - half);
            }
            window.sort_by(f64::total_cmp);
            window[kernel / 2]
        })
        .collect();
    Ok(Waveform::from_clamped(out, w.sample_rate()))
}

/// Snaps samples to the nearest of `levels` uniform values spanning `[-1, 1]`.
pub fn quantize(w: &Waveform, levels: usize) -> Result<Waveform> {
    if levels < 2 {
        return Err(Error::InvalidConfig(format!(
            "quantization needs at least 2 levels, got {levels}"
        )));
    }
    let steps = (levels - 1) as f64;
    let out = w
        .samples()
        .iter()
        .map(|&x| {
            let k = ((x + 1.0) * steps / 2.0).round().clamp(0.0, steps);
            -1.0 + 2.0 * k / steps
        })
        .collect();
    Ok(Waveform::from_clamped(out, w.sample_rate()))
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let y = x * x / 4.0;
    for k in 1..200 {
        term *= y / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc taps for the given transition band.
fn low_pass_taps(passband_hz: f64, stopband_hz: f64, sample_rate: f64) -> Vec<f64> {
    // Kaiser's order estimate undershoots slightly at the band edge, so the
    // design aims a few dB past the guaranteed attenuation.
    let a = LOW_PASS_ATTENUATION_DB + 5.0;
    let beta = 0.1102 * (a - 8.7);
    let width = 2.0 * PI * (stopband_hz - passband_hz) / sample_rate;
    let mut order = ((a - 8.0) / (2.285 * width)).ceil() as usize;
    if order % 2 == 1 {
        order += 1;
    }
    let cutoff = (passband_hz + stopband_hz) / 2.0 / sample_rate;
    let mid = order as f64 / 2.0;
    let norm = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..=order)
        .map(|n| {
            let m = n as f64 - mid;
            let ideal = if m == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * m).sin() / (PI * m)
            };
            let r = m / mid;
            ideal * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

/// Linear-phase FIR low-pass with its group delay removed.
pub fn low_pass_filter(w: &Waveform, passband_hz: f64, stopband_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate() as f64 / 2.0;
    if !(0.0 < passband_hz && passband_hz < stopband_hz && stopband_hz < nyquist) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < passband ({passband_hz}) < stopband ({stopband_hz}) < {nyquist}"
        )));
    }
    let taps = low_pass_taps(passband_hz, stopband_hz, w.sample_rate() as f64);
    let delay = taps.len() / 2;
    let x = w.samples();
    let out = (0..x.len())
        .map(|t| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, h)| {
                    let src = (t + delay).checked_sub(k)?;
                    x.get(src).map(|v| h * v)
                })
                .sum()
        })
        .collect();
    Ok(Waveform::from_clamped(out, w.sample_rate()))
}

/// Round trip through an external AAC encoder.
///
/// Needs `ffmpeg` on the `PATH`; without it the transform reports
/// [`Error::Unavailable`].
pub fn aac_compress(w: &Waveform, bitrate_kbps: u32) -> Result<Waveform> {
    let probe = Command::new("ffmpeg").arg("-version").output();
    if !matches!(probe, Ok(ref o) if o.status.success()) {
        return Err(Error::Unavailable("AAC compression needs ffmpeg on PATH".into()));
    }
    let dir = std::env::temp_dir().join(format!("spkanon-aac-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (wav, m4a, back) = (dir.join("in.wav"), dir.join("mid.m4a"), dir.join("out.wav"));
    save_waveform(&wav, w)?;
    let run = |args: &[&str]| -> Result<()> {
        let status = Command::new("ffmpeg")
            .args(["-y", "-loglevel", "error"])
            .args(args)
            .status()
            .map_err(|e| Error::io("ffmpeg", e))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::Unavailable(format!("ffmpeg exited with {status}")))
        }
    };
    let bitrate = format!("{bitrate_kbps}k");
    run(&["-i", wav.to_str().unwrap_or_default(), "-c:a", "aac", "-b:a", &bitrate, m4a.to_str().unwrap_or_default()])?;
    run(&["-i", m4a.to_str().unwrap_or_default(), "-ac", "1", "-ar", "16000", "-c:a", "pcm_s16le", back.to_str().unwrap_or_default()])?;
    let mut out = load_waveform(&back)?.into_samples();
    let _ = std::fs::remove_dir_all(&dir);
    out.resize(w.len(), 0.0);
    Ok(Waveform::from_clamped(out, w.sample_rate()))
}

/// A named signal transform, parsed from `name[:arg[:arg]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    MedianSmooth { kernel: usize },
    Quantize { levels: usize },
    LowPass { passband_hz: f64, stopband_hz: f64 },
    Aac { bitrate_kbps: u32 },
}

impl Transform {
    pub fn apply(&self, w: &Waveform) -> Result<Waveform> {
        match *self {
            Transform::MedianSmooth { kernel } => median_smooth(w, kernel),
            Transform::Quantize { levels } => quantize(w, levels),
            Transform::LowPass {
                passband_hz,
                stopband_hz,
            } => low_pass_filter(w, passband_hz, stopband_hz),
            Transform::Aac { bitrate_kbps } => aac_compress(w, bitrate_kbps),
        }
    }

    /// Applies a chain in order.
    pub fn apply_chain(chain: &[Transform], w: &Waveform) -> Result<Waveform> {
        chain.iter().try_fold(w.clone(), |acc, t| t.apply(&acc))
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::MedianSmooth { kernel } => write!(f, "median-smooth:{kernel}"),
            Transform::Quantize { levels } => write!(f, "quantize:{levels}"),
            Transform::LowPass {
                passband_hz,
                stopband_hz,
            } => write!(f, "low-pass:{passband_hz}:{stopband_hz}"),
            Transform::Aac { bitrate_kbps } => write!(f, "aac:{bitrate_kbps}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::InvalidConfig(format!("cannot parse transform {s:?}"));
        let num = |i: usize, default: &str| -> Result<f64> {
            args.get(i).copied().unwrap_or(default).parse::<f64>().map_err(|_| bad())
        };
        let t = match name {
            "median-smooth" => Transform::MedianSmooth {
                kernel: num(0, "3")? as usize,
            },
            "quantize" => Transform::Quantize {
                levels: num(0, "256")? as usize,
            },
            "low-pass" => Transform::LowPass {
                passband_hz: num(0, "500")?,
                stopband_hz: num(1, "1000")?,
            },
            "aac" => Transform::Aac {
                bitrate_kbps: num(0, "32")? as u32,
            },
            _ => return Err(bad()),
        };
        if args.len() > 2 {
            return Err(bad());
        }
        Ok(t)
    }
}

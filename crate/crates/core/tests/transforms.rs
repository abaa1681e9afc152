use std::f64::consts::PI;

use proptest::prelude::*;
use spkanon::evaluation::*;
use spkanon::signal::{Waveform, SAMPLE_RATE};
use spkanon::Error;

fn tone(freq: f64, amp: f64, len: usize) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    Waveform::new((0..len).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect(), SAMPLE_RATE).unwrap()
}

/// Amplitude and phase of the `freq` component over the interior samples,
/// by projection onto sine and cosine.
fn component(w: &Waveform, freq: f64, skip: usize) -> (f64, f64) {
    let fs = SAMPLE_RATE as f64;
    let x = &w.samples()[skip..w.len() - skip];
    let (mut s, mut c) = (0.0, 0.0);
    for (k, v) in x.iter().enumerate() {
        let arg = 2.0 * PI * freq * (k + skip) as f64 / fs;
        s += v * arg.sin();
        c += v * arg.cos();
    }
    let n = x.len() as f64 / 2.0;
    ((s * s + c * c).sqrt() / n, c.atan2(s))
}

fn gain_db(freq: f64) -> (f64, f64) {
    // A whole number of periods of every probe frequency fits the interior.
    let x = tone(freq, 0.5, 16_000);
    let y = low_pass_filter(&x, 500.0, 1000.0).unwrap();
    let (a, phase) = component(&y, freq, 2000);
    (20.0 * (a / 0.5).log10(), phase)
}

#[test]
fn passband_tone_keeps_amplitude_and_alignment() {
    let (db, phase) = gain_db(100.0);
    assert!(db.abs() <= 1.0, "{db} dB");
    assert!(phase.abs() < 1e-6, "phase {phase}");
}

#[test]
fn stopband_tones_are_suppressed() {
    let (db, _) = gain_db(2000.0);
    assert!(db <= -40.0, "{db} dB");
    for f in [1000.0, 1250.0, 3000.0, 6000.0] {
        let (db, _) = gain_db(f);
        assert!(db <= -LOW_PASS_ATTENUATION_DB, "{f} Hz: {db} dB");
    }
}

#[test]
fn low_pass_edge_cases() {
    let z = Waveform::zeros(3000, SAMPLE_RATE);
    assert!(low_pass_filter(&z, 500.0, 1000.0).unwrap().samples().iter().all(|&v| v == 0.0));
    for (p, s) in [(0.0, 1000.0), (1000.0, 500.0), (500.0, 8000.0)] {
        assert!(matches!(low_pass_filter(&z, p, s), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn median_examples() {
    let w = Waveform::new(vec![0.0, 1.0, 0.0, 1.0, 0.0], SAMPLE_RATE).unwrap();
    assert_eq!(median_smooth(&w, 3).unwrap().samples(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(median_smooth(&w, 1).unwrap(), w);
    let c = Waveform::new(vec![0.25; 9], SAMPLE_RATE).unwrap();
    assert_eq!(median_smooth(&c, 5).unwrap(), c);
    assert!(median_smooth(&w, 2).is_err());
}

#[test]
fn quantize_examples() {
    let w = Waveform::new(vec![-1.0, 0.2, -0.2, 1.0, 0.0], SAMPLE_RATE).unwrap();
    assert_eq!(quantize(&w, 2).unwrap().samples(), &[-1.0, 1.0, -1.0, 1.0, 1.0]);
    let on_grid = Waveform::new(vec![-1.0, -1.0 + 2.0 / 255.0 * 17.0, 1.0], SAMPLE_RATE).unwrap();
    assert_eq!(quantize(&on_grid, 256).unwrap(), on_grid);
    assert!(quantize(&w, 1).is_err());
}

#[test]
fn chain_parses_and_applies_in_order() {
    let chain: Vec<Transform> = ["median-smooth:3", "quantize:256", "low-pass:500:1000"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let x = tone(300.0, 0.3, 4000);
    let manual = low_pass_filter(&quantize(&median_smooth(&x, 3).unwrap(), 256).unwrap(), 500.0, 1000.0).unwrap();
    assert_eq!(Transform::apply_chain(&chain, &x).unwrap(), manual);
    assert_eq!(chain[2].to_string(), "low-pass:500:1000");
    assert!("median-smooth:x".parse::<Transform>().is_err());
    assert!("reverb:3".parse::<Transform>().is_err());
}

proptest! {
    #[test]
    fn quantization_error_is_bounded(levels in 2usize..1024, samples in prop::collection::vec(-1.0f64..=1.0, 1..200)) {
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let q = quantize(&w, levels).unwrap();
        let bound = 1.0 / (levels - 1) as f64;
        for (a, b) in w.samples().iter().zip(q.samples()) {
            prop_assert!((a - b).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn median_output_stays_within_input_range(samples in prop::collection::vec(-1.0f64..=1.0, 1..100), half in 0usize..4) {
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        let m = median_smooth(&w, 2 * half + 1).unwrap();
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(m.len(), w.len());
        prop_assert!(m.samples().iter().all(|v| (lo..=hi).contains(v)));
    }
}

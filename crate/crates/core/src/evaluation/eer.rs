use super::scoring::ScoreSet;
use crate::error::{Error, Result};

/// Equal error rate of a scored trial list.
pub fn compute_eer(s: &ScoreSet) -> Result<f64> {
    let (target, nontarget) = s.split_scores();
    eer(&target, &nontarget)
}

/// Equal error rate from raw target and nontarget scores.
///
/// A nontarget at or above the threshold is a false acceptance; a target
/// strictly below it is a false rejection. Thresholds run over the distinct
/// scores followed by `+inf`, and the rate is interpolated linearly between
/// the two operating points where `FAR - FRR` changes sign.
pub fn eer(target: &[f64], nontarget: &[f64]) -> Result<f64> {
    if target.is_empty() || nontarget.is_empty() {
        return Err(Error::Evaluation(format!(
            "EER needs both classes, got {} target and {} nontarget scores",
            target.len(),
            nontarget.len()
        )));
    }
    if target.iter().chain(nontarget).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("scores must be finite".into()));
    }
    let mut scored: Vec<(f64, bool)> = target
        .iter()
        .map(|&v| (v, true))
        .chain(nontarget.iter().map(|&v| (v, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nt, nn) = (target.len() as f64, nontarget.len() as f64);
    // Counts strictly below the current threshold.
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let far = (nontarget.len() - nontargets_below) as f64 / nn;
        let frr = targets_below as f64 / nt;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((far_a, frr_a)) => {
                    let d_a = far_a - frr_a;
                    let t = d_a / (d_a - d);
                    far_a + t * (far - far_a)
                }
                None => far,
            });
        }
        prev = Some((far, frr));
        // Advance past every score equal to the current threshold.
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
        if i == scored.len() {
            // threshold +inf: FAR 0, FRR 1
            let (far_a, frr_a) = (0.0, 1.0);
            let (far_p, frr_p) = prev.expect("set above");
            let d_p = far_p - frr_p;
            let t = d_p / (d_p - (far_a - frr_a));
            return Ok(far_p + t * (far_a - far_p));
        }
    }
}

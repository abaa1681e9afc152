//! Privacy evaluation: trial lists, cosine scoring, equal error rate, and the
//! signal transforms an adaptive attacker might apply before scoring.

mod eer;
mod scoring;
mod transforms;
mod trials;

pub use eer::{compute_eer, eer};
pub use scoring::{score_trials, spectral_similarity, EvaluationReport, ScoreSet};
pub use transforms::{
    aac_compress, low_pass_filter, median_smooth, quantize, Transform, LOW_PASS_ATTENUATION_DB,
};
pub use trials::{make_trials, read_trials, write_trials, Protocol, Trial, TrialList};

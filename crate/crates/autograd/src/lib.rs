//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! Every value on a [`Tape`] is an `Array2`; vectors are `1 × n` rows and
//! scalars are `1 × 1`. Operations are recorded as they are evaluated and
//! [`Tape::backward`] replays them in reverse to accumulate gradients for
//! the leaves that were created with [`Tape::leaf`].
//!
//! The crate is generic over [`Float`] so the same model code can run in
//! `f32` for training and in `f64` for finite-difference checks.

mod float;
mod ops;
pub mod optim;
mod params;
mod tape;

pub use float::{cast, Float};
pub use params::{BoundParams, ParamId, ParamSet, StoredMatrix};
pub use tape::{Gradients, Tape, Var};

/// Index value understood by [`Var::gather`] as "emit zero".
pub const GATHER_ZERO: usize = usize::MAX;

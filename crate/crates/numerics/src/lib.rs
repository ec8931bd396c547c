//! Deterministic dense numerics for the hypergraph table encoder: matrices,
//! vector kernels, a reverse-mode tape and a finite-difference checker.

pub mod gradcheck;
pub mod kernels;
pub mod matrix;
pub mod params;
pub mod tape;

pub use gradcheck::{gradient_check, GradCheckError, GradCheckReport};
pub use matrix::{dot, l2_distance, l2_norm, Matrix, Real};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Groups, Tape, Var};

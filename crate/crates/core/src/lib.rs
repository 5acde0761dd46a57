//! Link-level simulation of OTFS modulation combined with SCMA code-domain
//! multiple access.
//!
//! The crate is organised bottom-up:
//!
//! * [`dd`] holds the delay-Doppler grid, the SFFT/ISFFT pair and the
//!   row-wise vectorization used everywhere else.
//! * [`channel`] samples sparse delay-Doppler channels and builds the
//!   coefficient matrix `H` of the vectorized relation `y = Hx + z`.
//! * [`scma`] ingests and validates codebooks, derives factor matrices and
//!   places codewords on the grid.
//! * [`detect`] contains the downlink LMMSE + per-block MPA receiver and the
//!   uplink single-stage MPA over the effective factor graph.
//! * [`oracle`] provides exhaustive MAP references for small instances.
//! * [`sim`] is the Monte Carlo BER harness and the baselines.

// `!(x >= 0.0)` is how NaN gets rejected along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dd;
pub mod detect;
pub mod error;
pub mod oracle;
pub mod scma;
pub mod sim;

pub use error::{Error, Result};

/// Complex sample type used throughout the crate.
pub type Complex = num_complex::Complex64;

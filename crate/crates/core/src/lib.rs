//! Numerics for partially observed control systems driven by fractional
//! Brownian motion: fBm sampling and Wong–Zakai approximation, level-2 lifts,
//! sewing-based Young/rough integration, nilpotent CBHD log-series for the
//! transformation matrices, Monte-Carlo simulation of the transformed system,
//! and desk-scale maximum-principle checks.

pub mod cli;
pub mod error;
pub mod expr;
pub mod fbm;
pub mod lie;
pub mod lift;
pub mod mp;
pub mod regress;
pub mod report;
pub mod sde;
pub mod sewing;
pub mod system;
pub mod transform;
pub mod util;

pub use error::{Error, Result};

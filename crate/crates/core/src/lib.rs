//! Statistical clear-sky fitting of PV power data with year-over-year
//! degradation estimation.
//!
//! A power series is embedded as a time-of-day × day matrix, approximated by
//! a smooth low-rank quantile model, and fit by alternating convex steps in
//! which the year-over-year energy ratio enters as a linearized equality
//! constraint. The converged multiplier β is the degradation rate.
//!
//! ```no_run
//! use scsf_core::{baseline, fit, synth, HyperParams};
//!
//! let site = synth::generate(&synth::Scenario::default(), 1, "demo").unwrap();
//! let p = site.matrix();
//! let weights = baseline::detect_clear_days(&p).weights(baseline::DEFAULT_WEIGHT_FLOOR);
//! let result = fit(&p, &HyperParams::default(), &weights).unwrap();
//! println!("{}", baseline::format_rate(result.beta));
//! ```

pub mod baseline;
pub mod fleet;
pub mod ingest;
pub mod model;
mod parallel;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod tuning;

pub use ingest::{PowerMatrix, RawSeries, RegularSeries, ScrubConfig};
pub use model::{DailyEnergy, DegradationState, Factorization, HyperParams};
pub use solver::{fit, FitError, FitResult, RejectReason};

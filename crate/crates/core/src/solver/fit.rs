use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::init::initialize_values;
use super::steps::{left_step, right_step, StepReport};
use super::SolverError;
use crate::ingest::{PowerMatrix, MIN_FIT_DAYS};
use crate::model::{
    self, daily_energy, DailyEnergy, DegradationState, Factorization, HyperParams, ModelData, YEAR_LAG,
};

/// Sweeps always run before convergence is tested.
const MIN_SWEEPS: usize = 3;
/// Largest relative change of a constrained day's energy between sweeps at
/// convergence.
const ENERGY_TOL: f64 = 2e-4;
/// Fits with less observed daytime data than this are rejected outright.
const MIN_DAYTIME_COVERAGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    TooShort,
    TooSparse,
    NotConverged,
    Degenerate,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TooShort => "TooShort",
            Self::TooSparse => "TooSparse",
            Self::NotConverged => "NotConverged",
            Self::Degenerate => "Degenerate",
        })
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum FitError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("fit rejected ({reason}): {detail}")]
    Rejected { reason: RejectReason, detail: String },
}

impl FitError {
    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            Self::Rejected { reason, .. } => Some(*reason),
            Self::InvalidParams(_) => None,
        }
    }

    fn degenerate(e: impl std::fmt::Display) -> Self {
        Self::Rejected {
            reason: RejectReason::Degenerate,
            detail: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Objective after the sweep, in normalized units.
    pub objective: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Factors in kW: `left · right` is the unclamped clear-sky matrix.
    pub factorization: Factorization,
    /// `max(left · right, 0)` in kW.
    pub clear_sky: DMatrix<f64>,
    /// Fractional change per year.
    pub beta: f64,
    /// Clear-sky daily energy (kWh) of the clamped reconstruction.
    pub daily_energy: DailyEnergy,
    /// Unclamped daytime energy (kWh), the quantity the constraint acts on.
    pub linear_energy: Vec<f64>,
    /// Denominators (kWh) used in the final sweep.
    pub d_prev: Vec<f64>,
    /// Days `i` whose pair `(i, i + 365)` was constrained in the final sweep.
    pub constrained: Vec<usize>,
    pub iterations: usize,
    pub objective_trace: Vec<TracePoint>,
    pub converged: bool,
    pub reject_reason: Option<RejectReason>,
    /// Every convex step, in order (right then left per sweep).
    pub steps: Vec<StepReport>,
    /// Steps whose objective rose by more than `subproblem_tol` relative.
    pub descent_violations: usize,
    pub scale: f64,
    pub delta_t: f64,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn beta_percent(&self) -> f64 {
        100.0 * self.beta
    }

    pub fn accepted(&self) -> bool {
        self.reject_reason.is_none()
    }

    /// Largest deviation from β of `(dᵢ₊₃₆₅ − dᵢ)/dᵢ` over the constrained
    /// days, with the final energies as denominators.
    pub fn self_consistency_gap(&self) -> f64 {
        let d = &self.linear_energy;
        self.constrained
            .iter()
            .map(|&i| ((d[i + YEAR_LAG] - d[i]) / d[i] - self.beta).abs())
            .fold(0.0, f64::max)
    }

    /// β pooled from the final energies: least-squares slope of
    /// `dᵢ₊₃₆₅ − dᵢ` against `dᵢ`.
    pub fn pooled_ratio(&self) -> f64 {
        let d = &self.linear_energy;
        let (num, den) = self.constrained.iter().fold((0.0, 0.0), |(a, b), &i| {
            (a + (d[i + YEAR_LAG] - d[i]) * d[i], b + d[i] * d[i])
        });
        num / den
    }
}

/// Fits the clear-sky model with degradation to `p`. `weights` are per-day
/// loss weights in [0, 1].
pub fn fit(p: &PowerMatrix, hp: &HyperParams, weights: &[f64]) -> Result<FitResult, FitError> {
    let warnings = hp.validate().map_err(|e| FitError::InvalidParams(e.to_string()))?;
    if weights.len() != p.n() {
        return Err(FitError::InvalidParams(format!(
            "{} weights for {} days",
            weights.len(),
            p.n()
        )));
    }
    if p.n() < MIN_FIT_DAYS {
        return Err(FitError::Rejected {
            reason: RejectReason::TooShort,
            detail: format!("{} days, need {MIN_FIT_DAYS}", p.n()),
        });
    }
    if hp.k > p.m().min(p.n()) {
        return Err(FitError::InvalidParams(format!("k = {} exceeds m = {}", hp.k, p.m())));
    }
    let too_sparse = |detail: String| FitError::Rejected {
        reason: RejectReason::TooSparse,
        detail,
    };
    let data = match ModelData::new(p, weights) {
        Ok(d) => d,
        Err(model::ModelError::NoSignal) => return Err(too_sparse("no positive observations".into())),
        Err(e) => return Err(FitError::InvalidParams(e.to_string())),
    };
    let day_rows = data.daytime_rows();
    let coverage = data.daytime_coverage();
    if day_rows < 3 || coverage < MIN_DAYTIME_COVERAGE {
        return Err(too_sparse(format!(
            "{day_rows} daytime rows, {:.1} % observed",
            100.0 * coverage
        )));
    }

    let mut f = initialize_values(&data.values, p.mask(), hp.k, hp.tau).map_err(FitError::degenerate)?;
    let mut state = DegradationState {
        beta: hp.fixed_beta.unwrap_or(0.0),
        d_prev: data.linear_energy(&f),
    };

    let mut trace = Vec::new();
    let mut steps = Vec::new();
    let mut warm_right = None;
    let mut warm_left = None;
    let mut converged = false;
    let mut constrained = Vec::new();
    let mut d_used = state.d_prev.clone();
    let mut energy = state.d_prev.clone();

    for sweep in 1..=hp.max_iters {
        constrained = state.constrained_indices().map_err(FitError::degenerate)?;
        if constrained.is_empty() {
            return Err(FitError::degenerate("no day pairs carry usable energy"));
        }
        let (right, w) =
            right_step(&data, &f, hp, &state, warm_right.as_ref()).map_err(step_error)?;
        warm_right = Some(w);
        f.right = right.right;
        let beta = right.beta.expect("constrained set is nonempty");
        steps.push(right.report);

        let (left, w) = left_step(&data, &f, hp, &state, warm_left.as_ref()).map_err(step_error)?;
        warm_left = Some(w);
        f.left = left.left;
        steps.push(left.report);

        let objective = model::objective(&data, &f, hp, &state)
            .map_err(FitError::degenerate)?
            .total();
        energy = data.linear_energy(&f);
        if !beta.is_finite() || !objective.is_finite() || energy.iter().any(|e| !e.is_finite()) {
            return Err(FitError::degenerate("non-finite iterate"));
        }
        trace.push(TracePoint {
            iteration: sweep,
            objective,
            beta,
        });
        log::debug!("sweep {sweep}: beta {beta:.6} objective {objective:.6}");

        let beta_step = (beta - state.beta).abs();
        let energy_step = constrained
            .iter()
            .map(|&i| (energy[i] / state.d_prev[i] - 1.0).abs())
            .fold(0.0, f64::max);
        d_used = std::mem::replace(&mut state.d_prev, energy.clone());
        state.beta = beta;
        if sweep >= MIN_SWEEPS && beta_step < hp.beta_tol && energy_step < ENERGY_TOL {
            converged = true;
            break;
        }
    }

    let tol = hp.subproblem_tol;
    let descent_violations = steps.iter().filter(|s| s.relative_increase() > tol).count();
    let scale = data.scale;
    let factorization = Factorization {
        left: &f.left * scale,
        right: f.right,
    };
    let clear_sky = model::reconstruct(&factorization).map_err(FitError::degenerate)?;
    Ok(FitResult {
        daily_energy: daily_energy(&clear_sky, p.delta_t()),
        clear_sky,
        factorization,
        beta: state.beta,
        linear_energy: energy.iter().map(|e| e * scale).collect(),
        d_prev: d_used.iter().map(|e| e * scale).collect(),
        constrained,
        iterations: trace.len(),
        objective_trace: trace,
        converged,
        reject_reason: (!converged).then_some(RejectReason::NotConverged),
        steps,
        descent_violations,
        scale,
        delta_t: p.delta_t(),
        warnings,
    })
}

fn step_error(e: SolverError) -> FitError {
    FitError::degenerate(e)
}

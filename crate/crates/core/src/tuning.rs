//! Hyperparameter studies: Cartesian grid search and the τ sweep.
//!
//! Every grid point or τ value is an independent fit with no shared state,
//! so results depend only on the inputs and never on worker scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::PowerMatrix;
use crate::model::HyperParams;
use crate::parallel;
use crate::solver::{fit, FitError, FitResult};

/// Grid values are matched to sweep points within this distance.
const TAU_MATCH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TuningError {
    #[error("grid list `{0}` is empty")]
    EmptyGrid(&'static str),
    #[error("invalid grid value: {0}")]
    InvalidGrid(String),
    #[error("invalid τ step: {0}")]
    StepInvalid(String),
    #[error("nominal τ {0} is not on the sweep grid")]
    NominalOffGrid(f64),
    #[error("need at least 2 curves, got {0}")]
    TooFewCurves(usize),
    #[error("candidate τ {0} lies outside a curve's range")]
    CandidateOutOfRange(f64),
    #[error("no fit succeeded at the nominal τ {0}")]
    NominalFailed(f64),
}

/// Value lists for the grid axes. An empty `mu_year` list keeps the base
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub k: Vec<usize>,
    pub tau: Vec<f64>,
    pub mu_left: Vec<f64>,
    pub mu_right: Vec<f64>,
    pub mu_year: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::three_level()
    }
}

impl GridSpec {
    /// Low, medium and high values for each of k, τ, μ_L, μ_R: 81 points.
    pub fn three_level() -> Self {
        Self {
            k: vec![4, 6, 8],
            tau: vec![0.8, 0.85, 0.9],
            mu_left: vec![100.0, 500.0, 1000.0],
            mu_right: vec![500.0, 1000.0, 5000.0],
            mu_year: Vec::new(),
        }
    }

    /// A grid holding only `hp`'s values.
    pub fn single(hp: &HyperParams) -> Self {
        Self {
            k: vec![hp.k],
            tau: vec![hp.tau],
            mu_left: vec![hp.mu_left],
            mu_right: vec![hp.mu_right],
            mu_year: vec![hp.mu_year],
        }
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        for (name, len) in [
            ("k", self.k.len()),
            ("tau", self.tau.len()),
            ("mu_left", self.mu_left.len()),
            ("mu_right", self.mu_right.len()),
        ] {
            if len == 0 {
                return Err(TuningError::EmptyGrid(name));
            }
        }
        if let Some(k) = self.k.iter().find(|k| **k == 0) {
            return Err(TuningError::InvalidGrid(format!("k = {k}")));
        }
        if let Some(t) = self.tau.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(TuningError::InvalidGrid(format!("tau = {t}")));
        }
        let mus = self.mu_left.iter().chain(&self.mu_right).chain(&self.mu_year);
        if let Some(v) = mus.into_iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(TuningError::InvalidGrid(format!("weight = {v}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.k.len() * self.tau.len() * self.mu_left.len() * self.mu_right.len() * self.mu_year.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian points in lexicographic order over (k, τ, μ_L, μ_R, μ_year);
    /// every other field comes from `base`.
    pub fn points(&self, base: &HyperParams) -> Vec<HyperParams> {
        let years = if self.mu_year.is_empty() {
            vec![base.mu_year]
        } else {
            self.mu_year.clone()
        };
        let mut out = Vec::with_capacity(self.len());
        for &k in &self.k {
            for &tau in &self.tau {
                for &mu_left in &self.mu_left {
                    for &mu_right in &self.mu_right {
                        for &mu_year in &years {
                            out.push(HyperParams {
                                k,
                                tau,
                                mu_left,
                                mu_right,
                                mu_year,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One grid point and its fit (failures are kept).
#[derive(Debug, Clone)]
pub struct GridRun {
    pub params: HyperParams,
    pub outcome: Result<FitResult, FitError>,
}

impl GridRun {
    pub fn beta(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.beta)
    }
}

/// Fits every grid point. Output order is [`GridSpec::points`] order.
pub fn grid_search(
    p: &PowerMatrix,
    weights: &[f64],
    grid: &GridSpec,
    base: &HyperParams,
    workers: usize,
) -> Result<Vec<GridRun>, TuningError> {
    grid.validate()?;
    let points = grid.points(base);
    Ok(parallel::install(workers, || {
        points
            .into_par_iter()
            .map(|params| GridRun {
                outcome: fit(p, &params, weights),
                params,
            })
            .collect()
    }))
}

/// `max − min` of β over the accepted runs, or `None` if fewer than one.
pub fn beta_spread(runs: &[GridRun]) -> Option<f64> {
    let betas: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().filter(|f| f.accepted()).map(|f| f.beta))
        .collect();
    let lo = betas.iter().copied().reduce(f64::min)?;
    let hi = betas.iter().copied().reduce(f64::max)?;
    Some(hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub step: f64,
    pub nominal_tau: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            tau_lo: 0.8,
            tau_hi: 0.9,
            step: 0.005,
            nominal_tau: 0.85,
        }
    }
}

impl SweepSpec {
    /// The τ grid `lo, lo + step, …, hi`. The step must divide the range.
    pub fn taus(&self) -> Result<Vec<f64>, TuningError> {
        let (lo, hi, step) = (self.tau_lo, self.tau_hi, self.step);
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(TuningError::StepInvalid(format!("range [{lo}, {hi}] must satisfy 0 < lo < hi < 1")));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(TuningError::StepInvalid(format!("step = {step}")));
        }
        let count = ((hi - lo) / step).round();
        if count < 1.0 || (count * step - (hi - lo)).abs() > 1e-9 {
            return Err(TuningError::StepInvalid(format!("step {step} does not divide [{lo}, {hi}]")));
        }
        let taus: Vec<f64> = (0..=count as usize)
            .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
            .collect();
        if !taus.iter().any(|t| (t - self.nominal_tau).abs() <= TAU_MATCH) {
            return Err(TuningError::NominalOffGrid(self.nominal_tau));
        }
        Ok(taus)
    }
}

/// Raw β estimates over τ for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub site_id: String,
    /// Strictly increasing.
    pub taus: Vec<f64>,
    pub betas: Vec<f64>,
    pub nominal_tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveShape {
    Flat,
    Increasing,
    Decreasing,
    Peak,
    Valley,
    Irregular,
}

impl SweepCurve {
    /// β at `tau`, linearly interpolated between sweep points.
    pub fn beta_at(&self, tau: f64) -> Option<f64> {
        let (first, last) = (*self.taus.first()?, *self.taus.last()?);
        if tau < first - TAU_MATCH || tau > last + TAU_MATCH {
            return None;
        }
        if let Some(i) = self.taus.iter().position(|t| (t - tau).abs() <= TAU_MATCH) {
            return Some(self.betas[i]);
        }
        let i = self.taus.iter().position(|t| *t > tau)?;
        let (t0, t1) = (self.taus[i - 1], self.taus[i]);
        let w = (tau - t0) / (t1 - t0);
        Some((1.0 - w) * self.betas[i - 1] + w * self.betas[i])
    }

    /// `β(τ) − β(reference)` at every sweep point.
    pub fn normalized_to(&self, reference: f64) -> Option<Vec<f64>> {
        let b0 = self.beta_at(reference)?;
        Some(self.betas.iter().map(|b| b - b0).collect())
    }

    pub fn normalized(&self) -> Option<Vec<f64>> {
        self.normalized_to(self.nominal_tau)
    }

    /// Shape by the signs of successive differences larger than `tol`.
    pub fn shape(&self, tol: f64) -> CurveShape {
        let signs: Vec<i8> = self
            .betas
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|d| d.abs() > tol)
            .map(|d| if d > 0.0 { 1 } else { -1 })
            .collect();
        let mut runs: Vec<i8> = Vec::new();
        for s in signs {
            if runs.last() != Some(&s) {
                runs.push(s);
            }
        }
        match runs.as_slice() {
            [] => CurveShape::Flat,
            [1] => CurveShape::Increasing,
            [-1] => CurveShape::Decreasing,
            [1, -1] => CurveShape::Peak,
            [-1, 1] => CurveShape::Valley,
            _ => CurveShape::Irregular,
        }
    }
}

/// A τ sweep: the curve over successful fits plus the fits themselves.
#[derive(Debug, Clone)]
pub struct TauSweep {
    pub curve: SweepCurve,
    pub runs: Vec<GridRun>,
}

/// Fits each τ on the sweep grid with all other parameters from `base`.
pub fn tau_sweep(
    site_id: &str,
    p: &PowerMatrix,
    weights: &[f64],
    spec: &SweepSpec,
    base: &HyperParams,
    workers: usize,
) -> Result<TauSweep, TuningError> {
    let taus = spec.taus()?;
    let runs: Vec<GridRun> = parallel::install(workers, || {
        taus.par_iter()
            .map(|&tau| {
                let params = HyperParams { tau, ..base.clone() };
                GridRun {
                    outcome: fit(p, &params, weights),
                    params,
                }
            })
            .collect()
    });
    let (mut ts, mut bs) = (Vec::new(), Vec::new());
    for r in &runs {
        if let Some(b) = r.beta() {
            ts.push(r.params.tau);
            bs.push(b);
        }
    }
    if !ts.iter().any(|t| (t - spec.nominal_tau).abs() <= TAU_MATCH) {
        return Err(TuningError::NominalFailed(spec.nominal_tau));
    }
    Ok(TauSweep {
        curve: SweepCurve {
            site_id: site_id.to_string(),
            taus: ts,
            betas: bs,
            nominal_tau: spec.nominal_tau,
        },
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variability {
    pub best_tau: f64,
    /// `(candidate τ, Σ over sites and sweep points of squared normalized β)`.
    pub per_candidate: Vec<(f64, f64)>,
}

/// Picks the normalization τ minimizing the total squared normalized β.
/// Ties go to the smallest candidate.
pub fn tau_variability(curves: &[SweepCurve], candidates: &[f64]) -> Result<Variability, TuningError> {
    if curves.len() < 2 {
        return Err(TuningError::TooFewCurves(curves.len()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut per_candidate = Vec::with_capacity(sorted.len());
    for &c in &sorted {
        let mut total = 0.0;
        for curve in curves {
            let norm = curve.normalized_to(c).ok_or(TuningError::CandidateOutOfRange(c))?;
            total += norm.iter().map(|v| v * v).sum::<f64>();
        }
        per_candidate.push((c, total));
    }
    let best_tau = per_candidate
        .iter()
        .fold(None::<(f64, f64)>, |best, &(c, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((c, v)),
        })
        .map(|(c, _)| c)
        .ok_or(TuningError::EmptyGrid("candidates"))?;
    Ok(Variability {
        best_tau,
        per_candidate,
    })
}

//! Clear-day detection and residual diagnostics.
//!
//! A day's clear-day score is the product of two sub-scores in [0, 1]:
//! profile smoothness, `1 − r / ROUGHNESS_SCALE` with `r` the squared second
//! differences of the day's profile relative to its squared magnitude, and
//! envelope proximity, the day's energy over the rolling 90th percentile of
//! daily energy within ±10 days.

use serde::{Deserialize, Serialize};

use crate::ingest::PowerMatrix;
use crate::solver::FitResult;
use crate::stats;

pub const DEFAULT_CLEAR_THRESHOLD: f64 = 0.8;
pub const DEFAULT_WEIGHT_FLOOR: f64 = 0.05;
/// Relative roughness at which the smoothness sub-score reaches zero.
pub const ROUGHNESS_SCALE: f64 = 0.1;
pub const ENVELOPE_HALF_WINDOW: usize = 10;
pub const ENVELOPE_QUANTILE: f64 = 0.9;
pub const MIN_CLEAR_DAYS: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("only {found} clear days flagged, need {MIN_CLEAR_DAYS}")]
    TooFewClearDays { found: usize },
    #[error("fit covers {fit} days, data {data}")]
    LengthMismatch { fit: usize, data: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearDayScore {
    pub score: Vec<f64>,
    pub flags: Vec<bool>,
    pub threshold: f64,
}

impl ClearDayScore {
    pub fn clear_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// Loss weights `max(score, floor)`.
    pub fn weights(&self, floor: f64) -> Vec<f64> {
        self.score.iter().map(|s| s.max(floor).min(1.0)).collect()
    }
}

pub fn detect_clear_days(p: &PowerMatrix) -> ClearDayScore {
    detect_clear_days_with(p, DEFAULT_CLEAR_THRESHOLD)
}

pub fn detect_clear_days_with(p: &PowerMatrix, threshold: f64) -> ClearDayScore {
    let (m, n) = (p.m(), p.n());
    let observed: Vec<bool> = (0..n).map(|i| (0..m).any(|t| p.is_observed(t, i))).collect();
    let energy = p.daily_energy();

    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let (mut rough, mut mass) = (0.0, 0.0);
            for t in 0..m {
                if p.is_observed(t, i) {
                    mass += p.data()[(t, i)].powi(2);
                }
                if t >= 2 && (t - 2..=t).all(|s| p.is_observed(s, i)) {
                    let d = p.data()[(t - 2, i)] - 2.0 * p.data()[(t - 1, i)] + p.data()[(t, i)];
                    rough += d * d;
                }
            }
            if mass > 0.0 {
                (1.0 - rough / mass / ROUGHNESS_SCALE).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();

    let score: Vec<f64> = (0..n)
        .map(|i| {
            if !observed[i] {
                return 0.0;
            }
            let lo = i.saturating_sub(ENVELOPE_HALF_WINDOW);
            let hi = (i + ENVELOPE_HALF_WINDOW).min(n - 1);
            let window: Vec<f64> = (lo..=hi).filter(|&j| observed[j]).map(|j| energy[j]).collect();
            let envelope = stats::quantile(&window, ENVELOPE_QUANTILE).unwrap_or(0.0);
            let proximity = if envelope > 0.0 {
                (energy[i] / envelope).clamp(0.0, 1.0)
            } else {
                0.0
            };
            smooth[i] * proximity
        })
        .collect();
    let flags = score.iter().map(|s| *s >= threshold).collect();
    ClearDayScore {
        score,
        flags,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    /// `(day index, measured − clear-sky energy in kWh)` on clear days.
    pub residuals: Vec<(usize, f64)>,
    /// Least-squares slope, kWh per day.
    pub slope: f64,
    /// Normal-approximation 95 % half-width of the slope.
    pub slope_half_width: f64,
    pub intercept: f64,
}

impl ResidualDiagnostics {
    pub fn slope_per_year(&self) -> f64 {
        365.0 * self.slope
    }
}

pub fn clear_day_residuals(
    p: &PowerMatrix,
    fit: &FitResult,
    flags: &[bool],
) -> Result<ResidualDiagnostics, BaselineError> {
    let n = p.n();
    if fit.daily_energy.d.len() != n || flags.len() != n {
        return Err(BaselineError::LengthMismatch {
            fit: fit.daily_energy.d.len(),
            data: n,
        });
    }
    let measured = p.daily_energy();
    let residuals: Vec<(usize, f64)> = (0..n)
        .filter(|&i| flags[i])
        .map(|i| (i, measured[i] - fit.daily_energy.d[i]))
        .collect();
    if residuals.len() < MIN_CLEAR_DAYS {
        return Err(BaselineError::TooFewClearDays {
            found: residuals.len(),
        });
    }
    let (slope, intercept, se) = least_squares(&residuals);
    Ok(ResidualDiagnostics {
        residuals,
        slope,
        slope_half_width: 1.96 * se,
        intercept,
    })
}

/// Slope, intercept, and slope standard error of a simple linear fit.
fn least_squares(points: &[(usize, f64)]) -> (f64, f64, f64) {
    let len = points.len() as f64;
    let xm = points.iter().map(|p| p.0 as f64).sum::<f64>() / len;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / len;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - xm).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - xm) * (p.1 - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ym - slope * xm;
    let sse: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0 as f64).powi(2))
        .sum();
    let se = if points.len() > 2 && sxx > 0.0 {
        (sse / (len - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    (slope, intercept, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub rate_percent_per_year: f64,
    pub formatted: String,
    pub iterations: usize,
    pub converged: bool,
    pub residual_slope_kwh_per_year: f64,
    pub residual_slope_half_width: f64,
    pub clear_days: usize,
    pub accepted: bool,
    pub reject_reason: Option<String>,
}

/// `β = −0.026` → `"−2.6 %/yr"` (one decimal, Unicode minus).
pub fn format_rate(beta: f64) -> String {
    let pct = 100.0 * beta;
    let text = format!("{:.1}", pct.abs());
    if pct < 0.0 && text != "0.0" {
        format!("\u{2212}{text} %/yr")
    } else {
        format!("{text} %/yr")
    }
}

pub fn degradation_report(fit: &FitResult, diag: &ResidualDiagnostics) -> DegradationReport {
    DegradationReport {
        rate_percent_per_year: fit.beta_percent(),
        formatted: format_rate(fit.beta),
        iterations: fit.iterations,
        converged: fit.converged,
        residual_slope_kwh_per_year: diag.slope_per_year(),
        residual_slope_half_width: 365.0 * diag.slope_half_width,
        clear_days: diag.residuals.len(),
        accepted: fit.accepted(),
        reject_reason: fit.reject_reason.map(|r| r.to_string()),
    }
}

//! Artifact writers. Column names and units are documented in
//! `docs/formats.md`; the header constants below are the contract.

use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use serde::Serialize;

use scsf_core::baseline::{ClearDayScore, ResidualDiagnostics};
use scsf_core::fleet::{Comparison, FleetResult};
use scsf_core::ingest::PowerMatrix;
use scsf_core::tuning::{GridRun, SweepCurve};
use scsf_core::FitResult;

use crate::error::Result;

pub const DAILY_ENERGY_HEADER: [&str; 6] =
    ["date", "day", "measured_kwh", "clear_sky_kwh", "clear_score", "clear_day"];
pub const RESIDUALS_HEADER: [&str; 4] = ["date", "day", "residual_kwh", "trend_kwh"];
pub const GRID_HEADER: [&str; 11] = [
    "site_id",
    "k",
    "tau",
    "mu_left",
    "mu_right",
    "mu_year",
    "beta_percent",
    "converged",
    "accepted",
    "iterations",
    "reason",
];
pub const HISTOGRAM_HEADER: [&str; 3] = ["bin_lo_percent", "bin_hi_percent", "count"];
pub const SCATTER_HEADER: [&str; 4] = ["site_id", "parameter", "value", "beta_percent"];
pub const TAU_CURVES_HEADER: [&str; 4] = ["site_id", "tau", "beta_percent", "normalized_percent"];
pub const TAU_VARIABILITY_HEADER: [&str; 3] = ["candidate_tau", "variability", "selected"];
pub const FLEET_HEADER: [&str; 8] = [
    "site_id",
    "beta_percent",
    "status",
    "reason",
    "detail",
    "iterations",
    "runtime_s",
    "outlier",
];
pub const COMPARISON_HEADER: [&str; 7] = ["site_id", "scsf_percent", "external_percent", "lo", "hi", "delta", "within"];
pub const SYNTH_HEADER: [&str; 2] = ["timestamp", "power_kw"];
/// Rate histogram bin width, %/yr.
pub const HISTOGRAM_WIDTH: f64 = 0.1;

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    w.write_record(header).map_err(std::io::Error::other)?;
    Ok(w)
}

fn row<I, S>(w: &mut csv::Writer<File>, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).map_err(std::io::Error::other)?;
    Ok(())
}

fn finish(mut w: csv::Writer<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `HH:MM` at the start of sample `t`.
pub fn time_of_day(t: usize, delta_t_hours: f64) -> String {
    let minutes = (t as f64 * delta_t_hours * 60.0).round() as usize;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

/// Clear-sky matrix in kW: one row per time of day, one column per date.
pub fn clear_sky(path: &Path, fit: &FitResult, dates: &[NaiveDate]) -> Result<()> {
    let mut header = vec!["time".to_string()];
    header.extend(dates.iter().map(|d| d.to_string()));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = writer(path, &refs)?;
    for t in 0..fit.clear_sky.nrows() {
        let mut fields = vec![time_of_day(t, fit.delta_t)];
        fields.extend(fit.clear_sky.row(t).iter().map(|v| v.to_string()));
        row(&mut w, &fields)?;
    }
    finish(w)
}

pub fn daily_energy(path: &Path, p: &PowerMatrix, fit: &FitResult, clear: &ClearDayScore) -> Result<()> {
    let mut w = writer(path, &DAILY_ENERGY_HEADER)?;
    let measured = p.daily_energy();
    for (i, date) in p.day_index().iter().enumerate() {
        row(
            &mut w,
            [
                date.to_string(),
                i.to_string(),
                measured[i].to_string(),
                fit.daily_energy.d[i].to_string(),
                clear.score[i].to_string(),
                u8::from(clear.flags[i]).to_string(),
            ],
        )?;
    }
    finish(w)
}

pub fn residuals(path: &Path, dates: &[NaiveDate], diag: Option<&ResidualDiagnostics>) -> Result<()> {
    let mut w = writer(path, &RESIDUALS_HEADER)?;
    if let Some(d) = diag {
        for &(i, r) in &d.residuals {
            let trend = d.intercept + d.slope * i as f64;
            row(&mut w, [dates[i].to_string(), i.to_string(), r.to_string(), trend.to_string()])?;
        }
    }
    finish(w)
}

pub fn grid_results(path: &Path, runs: &[(String, GridRun)]) -> Result<()> {
    let mut w = writer(path, &GRID_HEADER)?;
    for (site, r) in runs {
        let h = &r.params;
        let (beta, converged, accepted, iters, reason) = match &r.outcome {
            Ok(f) => (
                Some(f.beta_percent()),
                f.converged,
                f.accepted(),
                f.iterations,
                f.reject_reason.map(|x| x.to_string()).unwrap_or_default(),
            ),
            Err(e) => (
                None,
                false,
                false,
                0,
                e.reason().map_or_else(|| "InvalidParams".to_string(), |x| x.to_string()),
            ),
        };
        row(
            &mut w,
            [
                site.clone(),
                h.k.to_string(),
                h.tau.to_string(),
                h.mu_left.to_string(),
                h.mu_right.to_string(),
                h.mu_year.to_string(),
                opt(beta),
                converged.to_string(),
                accepted.to_string(),
                iters.to_string(),
                reason,
            ],
        )?;
    }
    finish(w)
}

pub fn histogram(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = writer(path, &HISTOGRAM_HEADER)?;
    for (lo, count) in scsf_core::fleet::histogram(values, HISTOGRAM_WIDTH) {
        row(&mut w, [format!("{lo:.3}"), format!("{:.3}", lo + HISTOGRAM_WIDTH), count.to_string()])?;
    }
    finish(w)
}

/// Long format: one row per accepted run and tuned parameter.
pub fn param_scatter(path: &Path, runs: &[(String, GridRun)]) -> Result<()> {
    let mut w = writer(path, &SCATTER_HEADER)?;
    for (site, r) in runs {
        let Ok(f) = &r.outcome else { continue };
        if !f.accepted() {
            continue;
        }
        let h = &r.params;
        for (name, value) in [
            ("k", h.k as f64),
            ("tau", h.tau),
            ("mu_left", h.mu_left),
            ("mu_right", h.mu_right),
            ("mu_year", h.mu_year),
        ] {
            row(&mut w, [site.clone(), name.to_string(), value.to_string(), f.beta_percent().to_string()])?;
        }
    }
    finish(w)
}

pub fn tau_curves(path: &Path, curves: &[SweepCurve]) -> Result<()> {
    let mut w = writer(path, &TAU_CURVES_HEADER)?;
    for c in curves {
        let norm = c.normalized().unwrap_or_default();
        for (i, (t, b)) in c.taus.iter().zip(&c.betas).enumerate() {
            row(
                &mut w,
                [c.site_id.clone(), t.to_string(), (100.0 * b).to_string(), opt(norm.get(i).map(|v| 100.0 * v))],
            )?;
        }
    }
    finish(w)
}

pub fn tau_variability(path: &Path, per_candidate: &[(f64, f64)], best: f64) -> Result<()> {
    let mut w = writer(path, &TAU_VARIABILITY_HEADER)?;
    for &(t, v) in per_candidate {
        // variability in (%/yr)²
        row(&mut w, [t.to_string(), (1e4 * v).to_string(), u8::from(t == best).to_string()])?;
    }
    finish(w)
}

pub fn fleet_results(path: &Path, result: &FleetResult) -> Result<()> {
    let mut w = writer(path, &FLEET_HEADER)?;
    for (r, o) in result.records.iter().zip(&result.outlier) {
        row(
            &mut w,
            [
                r.site_id.clone(),
                opt(r.beta_percent),
                if r.accepted() { "accepted" } else { "rejected" }.to_string(),
                r.rejected.map(|c| c.to_string()).unwrap_or_default(),
                r.detail.clone().unwrap_or_default(),
                r.iterations.to_string(),
                format!("{:.3}", r.runtime_s),
                u8::from(*o).to_string(),
            ],
        )?;
    }
    finish(w)
}

pub fn comparison(path: &Path, c: &Comparison) -> Result<()> {
    let mut w = writer(path, &COMPARISON_HEADER)?;
    for r in &c.rows {
        row(
            &mut w,
            [
                r.site_id.clone(),
                r.scsf.to_string(),
                r.external.to_string(),
                r.lo.to_string(),
                r.hi.to_string(),
                r.delta.to_string(),
                u8::from(r.within).to_string(),
            ],
        )?;
    }
    finish(w)
}

/// A regular series as `timestamp,power_kw`; missing samples are blank.
pub fn series_csv(path: &Path, series: &scsf_core::RegularSeries) -> Result<()> {
    let mut w = writer(path, &SYNTH_HEADER)?;
    let m = series.samples_per_day();
    let midnight = series.start_date.and_hms_opt(0, 0, 0).expect("valid time");
    for (idx, v) in series.values.iter().enumerate() {
        let at = midnight
            + chrono::Duration::days((idx / m) as i64)
            + chrono::Duration::seconds((idx % m) as i64 * i64::from(series.interval_s));
        let value = v.map_or_else(String::new, |x| format!("{x:.6}"));
        row(&mut w, [at.format("%Y-%m-%dT%H:%M:%S").to_string(), value])?;
    }
    finish(w)
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;

use scsf_core::baseline::{self, DEFAULT_WEIGHT_FLOOR};
use scsf_core::fleet::{self, FleetError, FleetSite, FleetSummary, Quadrants};
use scsf_core::ingest::{PowerMatrix, ScrubReport};
use scsf_core::solver::TracePoint;
use scsf_core::synth::{self, Truth};
use scsf_core::tuning::{self, GridRun, SweepCurve};
use scsf_core::{FitError, HyperParams};

use crate::artifacts as art;
use crate::config::{Command, Common, Settings, Study};
use crate::error::{CliError, Result};
use crate::load::{fleet_inputs, ingest_error, load_site, site_id_of};
use crate::svg;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit { input, common } => fit(input, &common),
        Command::Tune { inputs, study, common } => tune(inputs, study, &common),
        Command::Fleet {
            input,
            external,
            common,
        } => fleet(input, external, &common),
        Command::Synth {
            beta,
            days,
            cloud_fraction,
            noise,
            capacity_shift,
            missing_days,
            sites,
            beta_std,
            common,
        } => {
            let mut settings = Settings::resolve(&common)?;
            let s = &mut settings.file.synth;
            let sc = &mut s.scenario;
            if let Some(v) = beta {
                sc.beta = v;
            }
            if let Some(v) = days {
                sc.days = v;
            }
            if let Some(v) = cloud_fraction {
                sc.cloud_fraction = v;
            }
            if let Some(v) = noise {
                sc.noise = v;
            }
            if capacity_shift.is_some() {
                sc.capacity_shift = capacity_shift;
            }
            if let Some(v) = missing_days {
                sc.missing_days = v;
            }
            if let Some(v) = sites {
                s.sites = v;
            }
            if let Some(v) = beta_std {
                s.beta_std = v;
            }
            synth(&settings)
        }
    }
}

fn fit_error(e: FitError) -> CliError {
    match e {
        FitError::InvalidParams(msg) => CliError::Config(msg),
        FitError::Rejected { reason, detail } => CliError::Rejected {
            reason: reason.to_string(),
            message: detail,
        },
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    site_id: String,
    input: String,
    start_date: NaiveDate,
    days: usize,
    samples_per_day: usize,
    interval_s: u32,
    params: &'a HyperParams,
    beta: f64,
    rate_percent_per_year: f64,
    formatted: String,
    converged: bool,
    accepted: bool,
    reject_reason: Option<String>,
    iterations: usize,
    descent_violations: usize,
    self_consistency_gap: f64,
    scale_kw: f64,
    constrained_pairs: usize,
    clear_days: usize,
    residual_slope_kwh_per_year: Option<f64>,
    residual_slope_half_width: Option<f64>,
    masked_fraction: f64,
    scrub: ScrubReport,
    warnings: &'a [String],
    objective_trace: &'a [TracePoint],
}

fn fit(input: Option<PathBuf>, common: &Common) -> Result<()> {
    let settings = Settings::resolve(common)?;
    let path = input
        .or_else(|| settings.file.fit.input.clone())
        .ok_or_else(|| CliError::config("fit needs an input file"))?;
    std::fs::create_dir_all(&settings.out)?;
    let file = &settings.file;
    let (p, scrubbed) = load_site(&path, &file.input, &file.scrub, true).map_err(|e| ingest_error(&path, e))?;
    let clear = baseline::detect_clear_days(&p);
    let hp = settings.hyper_params();
    let result = scsf_core::fit(&p, hp, &clear.weights(DEFAULT_WEIGHT_FLOOR)).map_err(fit_error)?;
    let diag = baseline::clear_day_residuals(&p, &result, &clear.flags)
        .map_err(|e| log::warn!("residual diagnostics unavailable: {e}"))
        .ok();

    let out = &settings.out;
    let dates = p.day_index();
    let report = FitReport {
        site_id: site_id_of(&path),
        input: path.display().to_string(),
        start_date: p.start_date(),
        days: p.n(),
        samples_per_day: p.m(),
        interval_s: file.input.interval_s,
        params: hp,
        beta: result.beta,
        rate_percent_per_year: result.beta_percent(),
        formatted: baseline::format_rate(result.beta),
        converged: result.converged,
        accepted: result.accepted(),
        reject_reason: result.reject_reason.map(|r| r.to_string()),
        iterations: result.iterations,
        descent_violations: result.descent_violations,
        self_consistency_gap: result.self_consistency_gap(),
        scale_kw: result.scale,
        constrained_pairs: result.constrained.len(),
        clear_days: clear.clear_count(),
        residual_slope_kwh_per_year: diag.as_ref().map(|d| d.slope_per_year()),
        residual_slope_half_width: diag.as_ref().map(|d| 365.0 * d.slope_half_width),
        masked_fraction: p.masked_fraction(),
        scrub: scrubbed,
        warnings: &result.warnings,
        objective_trace: &result.objective_trace,
    };
    art::write_json(&out.join("fit.json"), &report)?;
    art::clear_sky(&out.join("clear_sky.csv"), &result, &dates)?;
    art::daily_energy(&out.join("daily_energy.csv"), &p, &result, &clear)?;
    art::residuals(&out.join("residuals.csv"), &dates, diag.as_ref())?;
    std::fs::write(
        out.join("measured.svg"),
        svg::heatmap(p.data(), Some(p.mask()), "measured power"),
    )?;
    std::fs::write(out.join("clear_sky.svg"), svg::heatmap(&result.clear_sky, None, "clear-sky power"))?;
    log::info!("{}: {} after {} sweeps", report.site_id, report.formatted, result.iterations);

    match result.reject_reason {
        None => Ok(()),
        Some(r) => Err(CliError::Rejected {
            reason: r.to_string(),
            message: format!("fit of {} not accepted after {} sweeps", path.display(), result.iterations),
        }),
    }
}

#[derive(Serialize)]
struct SiteTuning {
    site_id: String,
    grid_runs: usize,
    grid_accepted: usize,
    grid_spread_percent: Option<f64>,
    sweep_points: usize,
    curve_shape: Option<tuning::CurveShape>,
}

#[derive(Serialize)]
struct TuneReport {
    study: Study,
    sites: Vec<SiteTuning>,
    best_tau: Option<f64>,
}

fn load_for_tuning(path: &Path, settings: &Settings) -> Result<(PowerMatrix, Vec<f64>)> {
    let f = &settings.file;
    let (p, _) = load_site(path, &f.input, &f.scrub, true).map_err(|e| ingest_error(path, e))?;
    let w = baseline::detect_clear_days(&p).weights(DEFAULT_WEIGHT_FLOOR);
    Ok((p, w))
}

fn accepted_count(runs: &[GridRun]) -> usize {
    runs.iter()
        .filter(|r| r.outcome.as_ref().is_ok_and(|f| f.accepted()))
        .count()
}

/// Curve shapes ignore steps below 0.01 %/yr.
const SHAPE_TOL: f64 = 1e-4;

fn tune(inputs: Vec<PathBuf>, study: Option<Study>, common: &Common) -> Result<()> {
    let settings = Settings::resolve(common)?;
    let spec = &settings.file.tune;
    let inputs = if inputs.is_empty() { spec.inputs.clone() } else { inputs };
    if inputs.is_empty() {
        return Err(CliError::config("tune needs at least one input file"));
    }
    let study = study.unwrap_or(spec.study);
    let (do_grid, do_sweep) = (study != Study::Sweep, study != Study::Grid);
    if do_grid {
        spec.grid.validate().map_err(CliError::config)?;
    }
    if do_sweep {
        spec.sweep.taus().map_err(CliError::config)?;
    }
    std::fs::create_dir_all(&settings.out)?;
    let base = settings.hyper_params();

    let mut grid_rows: Vec<(String, GridRun)> = Vec::new();
    let mut curves: Vec<SweepCurve> = Vec::new();
    let mut sites = Vec::new();
    let mut any_accepted = false;
    for path in &inputs {
        let id = site_id_of(path);
        let (p, weights) = load_for_tuning(path, &settings)?;
        let mut summary = SiteTuning {
            site_id: id.clone(),
            grid_runs: 0,
            grid_accepted: 0,
            grid_spread_percent: None,
            sweep_points: 0,
            curve_shape: None,
        };
        if do_grid {
            let runs = tuning::grid_search(&p, &weights, &spec.grid, base, settings.workers).map_err(CliError::config)?;
            summary.grid_runs = runs.len();
            summary.grid_accepted = accepted_count(&runs);
            summary.grid_spread_percent = tuning::beta_spread(&runs).map(|s| 100.0 * s);
            any_accepted |= summary.grid_accepted > 0;
            grid_rows.extend(runs.into_iter().map(|r| (id.clone(), r)));
        }
        if do_sweep {
            match tuning::tau_sweep(&id, &p, &weights, &spec.sweep, base, settings.workers) {
                Ok(sweep) => {
                    summary.sweep_points = sweep.curve.taus.len();
                    summary.curve_shape = Some(sweep.curve.shape(SHAPE_TOL));
                    any_accepted |= accepted_count(&sweep.runs) > 0;
                    curves.push(sweep.curve);
                }
                Err(e) => log::warn!("{id}: τ sweep failed: {e}"),
            }
        }
        sites.push(summary);
    }

    let out = &settings.out;
    let mut best_tau = None;
    if do_grid {
        let betas: Vec<f64> = grid_rows
            .iter()
            .filter_map(|(_, r)| r.outcome.as_ref().ok().filter(|f| f.accepted()).map(|f| f.beta_percent()))
            .collect();
        art::grid_results(&out.join("grid_results.csv"), &grid_rows)?;
        art::histogram(&out.join("beta_histogram.csv"), &betas)?;
        art::param_scatter(&out.join("param_scatter.csv"), &grid_rows)?;
    }
    if do_sweep {
        art::tau_curves(&out.join("tau_curves.csv"), &curves)?;
        let candidates = spec.sweep.taus().map_err(CliError::config)?;
        match tuning::tau_variability(&curves, &candidates) {
            Ok(v) => {
                art::tau_variability(&out.join("tau_variability.csv"), &v.per_candidate, v.best_tau)?;
                best_tau = Some(v.best_tau);
            }
            Err(e) => {
                log::warn!("τ variability not computed: {e}");
                art::tau_variability(&out.join("tau_variability.csv"), &[], f64::NAN)?;
            }
        }
    }
    art::write_json(&out.join("tune.json"), &TuneReport { study, sites, best_tau })?;
    if any_accepted {
        Ok(())
    } else {
        Err(CliError::Rejected {
            reason: "NoAcceptedRuns".into(),
            message: "no tuning run produced an accepted fit".into(),
        })
    }
}

#[derive(Serialize)]
struct ComparisonReport {
    matched: usize,
    within_fraction: f64,
    quadrants: Quadrants,
}

/// `summary.json`: the fleet summary plus the optional comparison. When no
/// site was accepted only the counts are present.
#[derive(Serialize)]
#[serde(untagged)]
enum SummaryBody {
    Full(FleetSummary),
    Counts {
        total: usize,
        included: usize,
        rejected: usize,
        rejected_by: BTreeMap<String, usize>,
    },
}

#[derive(Serialize)]
struct FleetReport {
    #[serde(flatten)]
    summary: SummaryBody,
    comparison: Option<ComparisonReport>,
}

fn fleet_error(e: FleetError) -> CliError {
    match e {
        FleetError::InvalidParams(m) => CliError::Config(m),
        FleetError::NothingAccepted => CliError::Rejected {
            reason: "NothingAccepted".into(),
            message: e.to_string(),
        },
        other => CliError::input(other),
    }
}

fn fleet(input: Option<PathBuf>, external: Option<PathBuf>, common: &Common) -> Result<()> {
    let settings = Settings::resolve(common)?;
    let f = &settings.file;
    let input = input
        .or_else(|| f.fleet.input.clone())
        .ok_or_else(|| CliError::config("fleet needs a directory or manifest"))?;
    let external = external.or_else(|| f.fleet.external.clone());
    let listed = fleet_inputs(&input)?;
    if listed.is_empty() {
        return Err(fleet_error(FleetError::NoSites));
    }
    std::fs::create_dir_all(&settings.out)?;
    let sites: Vec<FleetSite> = listed
        .iter()
        .map(|(id, path)| match load_site(path, &f.input, &f.scrub, false) {
            Ok((p, _)) => FleetSite::new(id.clone(), p),
            Err(e) => FleetSite::unreadable(id.clone(), e.to_string()),
        })
        .collect();
    let result = fleet::run_fleet(&sites, settings.hyper_params(), settings.workers).map_err(fleet_error)?;

    let out = &settings.out;
    art::fleet_results(&out.join("fleet_results.csv"), &result)?;
    let kept: Vec<f64> = result
        .records
        .iter()
        .zip(&result.outlier)
        .filter(|(_, o)| !**o)
        .filter_map(|(r, _)| r.accepted().then_some(r.beta_percent).flatten())
        .collect();
    art::histogram(&out.join("rate_histogram.csv"), &kept)?;
    let summary = fleet::summarize(&result);
    let mut comparison = None;
    if let (Some(path), Ok(_)) = (&external, &summary) {
        let file = std::fs::File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let table = fleet::read_external(file).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let c = fleet::compare_external(&result, &table).map_err(fleet_error)?;
        art::comparison(&out.join("comparison.csv"), &c)?;
        comparison = Some(ComparisonReport {
            matched: c.rows.len(),
            within_fraction: c.within_fraction,
            quadrants: c.quadrants,
        });
    }
    let body = match &summary {
        Ok(s) => SummaryBody::Full(s.clone()),
        Err(_) => {
            let mut rejected_by = BTreeMap::new();
            for code in result.records.iter().filter_map(|r| r.rejected) {
                *rejected_by.entry(code.to_string()).or_insert(0) += 1;
            }
            SummaryBody::Counts {
                total: result.records.len(),
                included: 0,
                rejected: result.records.len(),
                rejected_by,
            }
        }
    };
    let report = FleetReport { summary: body, comparison };
    art::write_json(&out.join("summary.json"), &report)?;
    summary.map(|s| log::info!("{} of {} sites accepted", s.included, s.total)).map_err(fleet_error)
}

#[derive(Serialize)]
struct SynthEntry<'a> {
    file: String,
    beta_percent: f64,
    #[serde(flatten)]
    truth: &'a Truth,
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    seed: u64,
    beta_std: f64,
    sites: Vec<SynthEntry<'a>>,
}

fn synth(settings: &Settings) -> Result<()> {
    let s = &settings.file.synth;
    s.scenario.validate().map_err(|e| CliError::config(e.0))?;
    if s.sites == 0 {
        return Err(CliError::config("synth needs at least one site"));
    }
    let generated = synth::generate_fleet(&s.scenario, s.sites, s.beta_std, s.seed).map_err(|e| CliError::config(e.0))?;
    std::fs::create_dir_all(&settings.out)?;
    let mut entries = Vec::with_capacity(generated.len());
    for site in &generated {
        let file = format!("{}.csv", site.truth.site_id);
        art::series_csv(&settings.out.join(&file), &site.series)?;
        entries.push(SynthEntry {
            file,
            beta_percent: 100.0 * site.truth.beta,
            truth: &site.truth,
        });
    }
    art::write_json(
        &settings.out.join("truth.json"),
        &SynthManifest {
            seed: s.seed,
            beta_std: s.beta_std,
            sites: entries,
        },
    )
}

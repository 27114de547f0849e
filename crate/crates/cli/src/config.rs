//! Command-line flags, the TOML config file, and their merge. Flags win over
//! the file; `SCSF_WORKERS` only supplies a default worker count.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scsf_core::ingest::{ColumnSpec, DEFAULT_INTERVAL_S};
use scsf_core::synth::Scenario;
use scsf_core::tuning::{GridSpec, SweepSpec};
use scsf_core::{HyperParams, ScrubConfig};

use crate::error::{CliError, Result};

pub const WORKERS_ENV: &str = "SCSF_WORKERS";
pub const DEFAULT_OUT: &str = "scsf_out";

#[derive(Debug, Parser)]
#[command(name = "scsf", version, about = "Clear-sky fitting and degradation estimation for PV power data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one site and write the clear-sky model and diagnostics.
    Fit {
        /// Power CSV with a timestamp column and a power column in kW.
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid search and/or τ sweep over one or more sites.
    Tune {
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        study: Option<Study>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit every site in a directory of CSVs or a manifest file.
    Fleet {
        input: Option<PathBuf>,
        /// External estimates: CSV with columns site_id, rate, lo, hi (%/yr).
        #[arg(long)]
        external: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic sites with known degradation.
    Synth {
        /// Degradation rate, fraction per year (−0.01 = −1 %/yr).
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<f64>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        cloud_fraction: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Multiplier applied to the first 365 days.
        #[arg(long)]
        capacity_shift: Option<f64>,
        #[arg(long)]
        missing_days: Option<f64>,
        #[arg(long)]
        sites: Option<usize>,
        /// Standard deviation of per-site rates around `beta`.
        #[arg(long)]
        beta_std: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Grid,
    Sweep,
    Both,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for tuning and fleet runs (0 = one per core).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Sampling interval in seconds.
    #[arg(long)]
    pub interval: Option<u32>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mu_left: Option<f64>,
    #[arg(long)]
    pub mu_right: Option<f64>,
    #[arg(long)]
    pub mu_year: Option<f64>,
    /// Hold the degradation rate at zero.
    #[arg(long)]
    pub no_degradation: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunSection,
    pub input: InputSection,
    pub params: HyperParams,
    pub scrub: ScrubConfig,
    pub fit: FitSection,
    pub tune: TuneSection,
    pub fleet: FleetSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub interval_s: u32,
    /// Fixed local standard time offset, minutes east of UTC.
    pub utc_offset_minutes: i32,
    pub timestamp_column: Option<String>,
    pub power_column: Option<String>,
}

impl Default for InputSection {
    fn default() -> Self {
        Self {
            interval_s: DEFAULT_INTERVAL_S,
            utc_offset_minutes: 0,
            timestamp_column: None,
            power_column: None,
        }
    }
}

impl InputSection {
    pub fn columns(&self) -> ColumnSpec {
        ColumnSpec {
            timestamp: self.timestamp_column.clone(),
            power: self.power_column.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub inputs: Vec<PathBuf>,
    pub study: Study,
    pub grid: GridSpec,
    pub sweep: SweepSpec,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            study: Study::Grid,
            grid: GridSpec::three_level(),
            sweep: SweepSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSection {
    /// Directory of per-site CSVs, or a manifest CSV with `site_id,path`.
    pub input: Option<PathBuf>,
    pub external: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub sites: usize,
    pub beta_std: f64,
    pub scenario: Scenario,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 1,
            sites: 1,
            beta_std: 0.0,
            scenario: Scenario {
                interval_s: DEFAULT_INTERVAL_S,
                ..Scenario::default()
            },
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Without an explicit `[synth.scenario] interval_s`, synthetic data is
    /// sampled at the input interval so `synth` output reads back unchanged.
    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        let mut config: Self = toml::from_str(text)?;
        let table: toml::Table = toml::from_str(text)?;
        let explicit = table
            .get("synth")
            .and_then(|v| v.get("scenario"))
            .and_then(|v| v.get("interval_s"))
            .is_some();
        if !explicit {
            config.synth.scenario.interval_s = config.input.interval_s;
        }
        Ok(config)
    }
}

/// Everything a command needs after merging flags, file and environment.
#[derive(Debug, Clone)]
pub struct Settings {
    pub file: FileConfig,
    pub out: PathBuf,
    pub workers: usize,
}

fn env_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{WORKERS_ENV}={v:?} is not a worker count"))),
        Err(_) => Ok(None),
    }
}

impl Settings {
    /// Merges `common` over the config file and validates the parameters.
    pub fn resolve(common: &Common) -> Result<Self> {
        let mut file = match &common.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let hp = &mut file.params;
        if let Some(k) = common.k {
            hp.k = k;
        }
        if let Some(t) = common.tau {
            hp.tau = t;
        }
        if let Some(v) = common.mu_left {
            hp.mu_left = v;
        }
        if let Some(v) = common.mu_right {
            hp.mu_right = v;
        }
        if let Some(v) = common.mu_year {
            hp.mu_year = v;
        }
        if common.no_degradation {
            hp.fixed_beta = Some(0.0);
        }
        if let Some(i) = common.interval {
            file.input.interval_s = i;
            file.synth.scenario.interval_s = i;
        }
        if let Some(s) = common.seed {
            file.synth.seed = s;
        }
        for w in hp.validate().map_err(CliError::config)? {
            log::warn!("{w}");
        }
        let interval = file.input.interval_s;
        if interval == 0 || 86_400 % interval != 0 {
            return Err(CliError::config(format!("interval {interval} s must divide 86400")));
        }
        let workers = match common.workers.or(file.run.workers) {
            Some(w) => w,
            None => env_workers()?.unwrap_or(0),
        };
        let out = common
            .out
            .clone()
            .or_else(|| file.run.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { file, out, workers })
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.file.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_parameters() {
        let c = FileConfig::default();
        assert_eq!(c.params, HyperParams::default());
        assert_eq!((c.params.k, c.params.tau, c.params.mu_left, c.params.mu_right), (6, 0.85, 500.0, 1000.0));
        assert_eq!(c.tune.grid.len(), 81);
    }

    #[test]
    fn synth_follows_the_input_interval_unless_set() {
        assert_eq!(FileConfig::default().synth.scenario.interval_s, DEFAULT_INTERVAL_S);
        let c = FileConfig::parse("[input]\ninterval_s = 900\n").unwrap();
        assert_eq!(c.synth.scenario.interval_s, 900);
        let c = FileConfig::parse("[input]\ninterval_s = 900\n[synth.scenario]\ninterval_s = 600\n").unwrap();
        assert_eq!(c.synth.scenario.interval_s, 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FileConfig::parse("[params]\nkk = 3\n").is_err());
        assert!(FileConfig::parse("[nonsense]\n").is_err());
        assert!(FileConfig::parse("[tune.grid]\nk = [4]\nbogus = 1\n").is_err());
        let ok = FileConfig::parse("[params]\nk = 4\n[tune]\nstudy = \"sweep\"\n").unwrap();
        assert_eq!(ok.params.k, 4);
        assert_eq!(ok.tune.study, Study::Sweep);
    }

    #[test]
    fn flags_override_file_and_tau_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[params]\ntau = 0.8\nk = 4\n[run]\nworkers = 3\n").unwrap();
        let common = Common {
            config: Some(path.clone()),
            tau: Some(0.9),
            ..Default::default()
        };
        let s = Settings::resolve(&common).unwrap();
        assert_eq!((s.file.params.tau, s.file.params.k, s.workers), (0.9, 4, 3));
        let bad = Common {
            tau: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(Settings::resolve(&bad), Err(CliError::Config(_))));
    }
}

use std::fs::File;
use std::path::{Path, PathBuf};

use scsf_core::ingest::{self, IngestError, PowerMatrix, ScrubReport};
use scsf_core::ScrubConfig;

use crate::config::InputSection;
use crate::error::{CliError, Result};

/// `power.csv` → `power`.
pub fn site_id_of(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "site".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Parse, regularize, embed and scrub one file. With `require_span` a
/// series shorter than two years is an error.
pub fn load_site(
    path: &Path,
    input: &InputSection,
    rules: &ScrubConfig,
    require_span: bool,
) -> std::result::Result<(PowerMatrix, ScrubReport), IngestError> {
    let file = File::open(path).map_err(|e| IngestError::UnreadableSource(format!("{}: {e}", path.display())))?;
    let raw = ingest::parse_power_csv(file, &input.columns(), &site_id_of(path))?;
    if raw.dropped_rows > 0 {
        log::warn!("{}: dropped {} unparseable rows", path.display(), raw.dropped_rows);
    }
    let series = ingest::regularize(&raw, input.interval_s, input.utc_offset_minutes)?;
    let matrix = if require_span {
        ingest::embed_matrix(&series)?
    } else {
        ingest::embed_any(&series)?
    };
    Ok(ingest::scrub(&matrix, rules))
}

/// Maps ingest failures: a short span is a rejection, the rest bad input.
pub fn ingest_error(path: &Path, e: IngestError) -> CliError {
    match e {
        IngestError::SpanTooShort { .. } => CliError::Rejected {
            reason: "TooShort".into(),
            message: format!("{}: {e}", path.display()),
        },
        IngestError::IntervalInvalid(_) => CliError::config(e),
        other => CliError::input(format!("{}: {other}", path.display())),
    }
}

/// Site files of a fleet: `*.csv` in a directory (sorted), or the rows of a
/// manifest CSV with columns `site_id,path` (relative paths resolve against
/// the manifest's directory).
pub fn fleet_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        return Ok(files.into_iter().map(|p| (site_id_of(&p), p)).collect());
    }
    #[derive(serde::Deserialize)]
    struct Row {
        site_id: String,
        path: PathBuf,
    }
    let base = input.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(input)
        .map_err(|e| CliError::input(format!("{}: {e}", input.display())))?;
    rdr.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| CliError::input(format!("{}: {e}", input.display())))?;
            let path = if row.path.is_absolute() { row.path } else { base.join(row.path) };
            Ok((row.site_id, path))
        })
        .collect()
}

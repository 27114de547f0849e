//! Raw power time series to the time-of-day × day matrix used by the fitter.
//!
//! The pipeline is `parse_power_csv` → `regularize` → `embed_matrix` →
//! `scrub`. Day boundaries are local standard midnight at a fixed UTC offset
//! so that columns exactly 365 apart describe the same solar date.

mod csv;
mod matrix;
mod regularize;
mod scrub;

pub use self::csv::{parse_power_csv, ColumnSpec, RawRecord, RawSeries};
pub use self::matrix::{daytime_rows, embed_any, embed_matrix, PowerMatrix, MIN_FIT_DAYS};
pub use self::regularize::{regularize, RegularSeries, DEFAULT_INTERVAL_S};
pub use self::scrub::{scrub, ScrubConfig, ScrubReport};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read power data: {0}")]
    UnreadableSource(String),
    #[error("no parseable rows in source")]
    NoParseableRows,
    #[error("ambiguous schema: several candidate power columns {0:?}")]
    AmbiguousSchema(Vec<String>),
    #[error("column {0:?} not found")]
    MissingColumn(String),
    #[error("sampling interval {0} s must be positive and divide 86400")]
    IntervalInvalid(u32),
    #[error("series spans {days} days, at least {required} required")]
    SpanTooShort { days: usize, required: usize },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
}

use std::io::Read;

use chrono::{DateTime, NaiveDateTime};

use super::IngestError;

/// Which columns hold the timestamp and the power reading. `None` means
/// auto-detect from the header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnSpec {
    pub timestamp: Option<String>,
    pub power: Option<String>,
}

impl ColumnSpec {
    pub fn named(timestamp: &str, power: &str) -> Self {
        Self {
            timestamp: Some(timestamp.to_string()),
            power: Some(power.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    /// Wall-clock time as written in the source.
    pub timestamp: NaiveDateTime,
    /// Offset from UTC in minutes when the source carried one.
    pub offset_minutes: Option<i32>,
    /// kW; `None` for missing tokens. Negative readings are kept.
    pub power: Option<f64>,
}

impl RawRecord {
    pub fn is_negative(&self) -> bool {
        matches!(self.power, Some(p) if p < 0.0)
    }

    /// Wall-clock time at a fixed offset of `offset_minutes` from UTC.
    pub fn local_at(&self, offset_minutes: i32) -> NaiveDateTime {
        match self.offset_minutes {
            None => self.timestamp,
            Some(src) => {
                self.timestamp + chrono::Duration::minutes(i64::from(offset_minutes - src))
            }
        }
    }

    fn sort_key(&self) -> NaiveDateTime {
        self.local_at(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub site_id: String,
    /// Strictly increasing in time.
    pub records: Vec<RawRecord>,
    /// Rows dropped because the timestamp or power token did not parse.
    pub dropped_rows: usize,
    /// Later rows sharing a timestamp with an earlier one (dropped).
    pub duplicate_rows: usize,
}

impl RawSeries {
    pub fn negative_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_negative()).count()
    }
}

const MISSING_TOKENS: [&str; 7] = ["", "nan", "null", "na", "n/a", "none", "-"];
const TIME_NAMES: [&str; 6] = ["timestamp", "time", "datetime", "date_time", "ts", "t"];
const POWER_HINTS: [&str; 4] = ["power", "kw", "ac_power", "p"];

fn parse_power(token: &str) -> Result<Option<f64>, ()> {
    let t = token.trim();
    if MISSING_TOKENS.contains(&t.to_ascii_lowercase().as_str()) {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(_) => Err(()),
    }
}

/// ISO-8601 timestamps, with or without an explicit offset.
pub(crate) fn parse_timestamp(token: &str) -> Option<(NaiveDateTime, Option<i32>)> {
    let t = token.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Some((dt.naive_local(), Some(dt.offset().local_minus_utc() / 60)));
    }
    for fmt in ["%Y-%m-%dT%H:%M%:z", "%Y-%m-%d %H:%M:%S%:z", "%Y-%m-%d %H:%M%:z"] {
        if let Ok(dt) = DateTime::parse_from_str(t, fmt) {
            return Some((dt.naive_local(), Some(dt.offset().local_minus_utc() / 60)));
        }
    }
    let naive = t.strip_suffix('Z').unwrap_or(t);
    let fmts = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
    ];
    for fmt in fmts {
        if let Ok(dt) = NaiveDateTime::parse_from_str(naive, fmt) {
            let off = if naive.len() != t.len() { Some(0) } else { None };
            return Some((dt, off));
        }
    }
    None
}

fn find_column(headers: &[String], name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .or_else(|| headers.iter().position(|h| h.eq_ignore_ascii_case(name)))
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

fn detect_power_column(
    headers: &[String],
    rows: &[csv::StringRecord],
    time_col: usize,
) -> Result<usize, IngestError> {
    let candidates: Vec<usize> = (0..headers.len())
        .filter(|&c| c != time_col)
        .filter(|&c| {
            rows.iter()
                .any(|r| matches!(r.get(c).map(parse_power), Some(Ok(Some(_)))))
        })
        .collect();
    match candidates.as_slice() {
        [] => {
            // all-missing data: any single column of missing tokens
            let blank: Vec<usize> = (0..headers.len())
                .filter(|&c| c != time_col)
                .filter(|&c| rows.iter().all(|r| matches!(r.get(c).map(parse_power), Some(Ok(None)))))
                .collect();
            match blank.as_slice() {
                [only] => Ok(*only),
                _ => Err(IngestError::NoParseableRows),
            }
        }
        [only] => Ok(*only),
        many => {
            let hinted: Vec<usize> = many
                .iter()
                .copied()
                .filter(|&c| POWER_HINTS.contains(&headers[c].to_ascii_lowercase().as_str()))
                .collect();
            if hinted.len() == 1 {
                Ok(hinted[0])
            } else {
                Err(IngestError::AmbiguousSchema(
                    many.iter().map(|&c| headers[c].clone()).collect(),
                ))
            }
        }
    }
}

/// Reads delimited text with a header row into a [`RawSeries`].
///
/// Rows whose timestamp or power token does not parse are dropped and
/// counted; missing-value tokens (`""`, `NaN`, `null`, ...) produce records
/// with `power = None`.
pub fn parse_power_csv<R: Read>(
    source: R,
    schema: &ColumnSpec,
    site_id: &str,
) -> Result<RawSeries, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::UnreadableSource(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(|e| IngestError::UnreadableSource(e.to_string()))?);
    }
    if headers.is_empty() || rows.is_empty() {
        return Err(IngestError::NoParseableRows);
    }

    let time_col = match &schema.timestamp {
        Some(name) => find_column(&headers, name)?,
        None => headers
            .iter()
            .position(|h| TIME_NAMES.contains(&h.to_ascii_lowercase().as_str()))
            .unwrap_or(0),
    };
    let power_col = match &schema.power {
        Some(name) => find_column(&headers, name)?,
        None => detect_power_column(&headers, &rows, time_col)?,
    };

    let mut records = Vec::with_capacity(rows.len());
    let mut dropped = 0;
    for row in &rows {
        let ts = row.get(time_col).and_then(parse_timestamp);
        let power = row.get(power_col).map(parse_power);
        match (ts, power) {
            (Some((timestamp, offset_minutes)), Some(Ok(power))) => records.push(RawRecord {
                timestamp,
                offset_minutes,
                power,
            }),
            _ => dropped += 1,
        }
    }
    if records.is_empty() {
        return Err(IngestError::NoParseableRows);
    }

    records.sort_by_key(RawRecord::sort_key);
    let before = records.len();
    records.dedup_by_key(|r| r.sort_key());
    Ok(RawSeries {
        site_id: site_id.to_string(),
        duplicate_rows: before - records.len(),
        records,
        dropped_rows: dropped,
    })
}

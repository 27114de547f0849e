use chrono::{NaiveDate, NaiveTime};

use super::{IngestError, RawRecord, RawSeries};

pub const DEFAULT_INTERVAL_S: u32 = 300;
const SECONDS_PER_DAY: u32 = 86_400;

/// A power series on a fixed grid of whole local-standard-time days.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularSeries {
    pub site_id: String,
    pub start_date: NaiveDate,
    pub interval_s: u32,
    /// Minutes east of UTC, constant throughout (no daylight saving).
    pub utc_offset_minutes: i32,
    /// `n_days · samples_per_day` bin values in kW.
    pub values: Vec<Option<f64>>,
}

impl RegularSeries {
    pub fn samples_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.interval_s) as usize
    }

    pub fn n_days(&self) -> usize {
        self.values.len() / self.samples_per_day()
    }

    /// One record per bin at the bin's start time, missing bins included.
    pub fn to_raw(&self) -> RawSeries {
        let m = self.samples_per_day();
        let midnight = self.start_date.and_time(NaiveTime::MIN);
        let records = self
            .values
            .iter()
            .enumerate()
            .map(|(idx, &power)| {
                let day = (idx / m) as i64;
                let secs = (idx % m) as i64 * i64::from(self.interval_s);
                RawRecord {
                    timestamp: midnight
                        + chrono::Duration::days(day)
                        + chrono::Duration::seconds(secs),
                    offset_minutes: None,
                    power,
                }
            })
            .collect();
        RawSeries {
            site_id: self.site_id.clone(),
            records,
            dropped_rows: 0,
            duplicate_rows: 0,
        }
    }
}

pub(crate) fn check_interval(interval_s: u32) -> Result<(), IngestError> {
    if interval_s == 0 || !SECONDS_PER_DAY.is_multiple_of(interval_s) {
        Err(IngestError::IntervalInvalid(interval_s))
    } else {
        Ok(())
    }
}

/// Bins raw records onto a fixed grid by bin mean, padding to whole days.
/// Empty bins stay missing; nothing is interpolated.
pub fn regularize(
    raw: &RawSeries,
    interval_s: u32,
    utc_offset_minutes: i32,
) -> Result<RegularSeries, IngestError> {
    check_interval(interval_s)?;
    let first = raw.records.first().ok_or(IngestError::SpanTooShort {
        days: 0,
        required: 1,
    })?;
    let last = raw.records.last().expect("nonempty");
    let start_date = first.local_at(utc_offset_minutes).date();
    let end_date = last.local_at(utc_offset_minutes).date();
    let n_days = (end_date - start_date).num_days() as usize + 1;
    let m = (SECONDS_PER_DAY / interval_s) as usize;
    let midnight = start_date.and_time(NaiveTime::MIN);

    let mut sums = vec![0.0; n_days * m];
    let mut counts = vec![0u32; n_days * m];
    for rec in &raw.records {
        let Some(p) = rec.power else { continue };
        let secs = (rec.local_at(utc_offset_minutes) - midnight).num_seconds();
        if secs < 0 {
            continue;
        }
        let bin = (secs / i64::from(interval_s)) as usize;
        if bin < sums.len() {
            sums[bin] += p;
            counts[bin] += 1;
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / f64::from(c)))
        .collect();
    Ok(RegularSeries {
        site_id: raw.site_id.clone(),
        start_date,
        interval_s,
        utc_offset_minutes,
        values,
    })
}

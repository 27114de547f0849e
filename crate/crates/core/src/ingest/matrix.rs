use chrono::NaiveDate;
use nalgebra::DMatrix;

use super::{IngestError, RegularSeries};
use crate::stats;

/// Two full years: the one-year lag needs columns `i` and `i + 365`.
pub const MIN_FIT_DAYS: usize = 730;

/// Power data arranged as time-of-day (rows) × day (columns).
///
/// Masked-out entries hold 0.0 and are never read by a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    data: DMatrix<f64>,
    mask: DMatrix<bool>,
    delta_t: f64,
    start_date: NaiveDate,
}

impl PowerMatrix {
    /// Builds a matrix; masked entries are zeroed, non-finite observed
    /// entries are masked.
    pub fn new(
        mut data: DMatrix<f64>,
        mut mask: DMatrix<bool>,
        delta_t: f64,
        start_date: NaiveDate,
    ) -> Result<Self, IngestError> {
        if data.shape() != mask.shape() {
            return Err(IngestError::Shape(format!(
                "data {:?} vs mask {:?}",
                data.shape(),
                mask.shape()
            )));
        }
        if !(delta_t > 0.0 && delta_t.is_finite()) {
            return Err(IngestError::Shape(format!("delta_t {delta_t} must be positive")));
        }
        for (v, m) in data.iter_mut().zip(mask.iter_mut()) {
            if !v.is_finite() {
                *m = false;
            }
            if !*m {
                *v = 0.0;
            }
        }
        Ok(Self {
            data,
            mask,
            delta_t,
            start_date,
        })
    }

    /// Fully observed matrix.
    pub fn observed(data: DMatrix<f64>, delta_t: f64, start_date: NaiveDate) -> Result<Self, IngestError> {
        let mask = DMatrix::from_element(data.nrows(), data.ncols(), true);
        Self::new(data, mask, delta_t, start_date)
    }

    /// Samples per day.
    pub fn m(&self) -> usize {
        self.data.nrows()
    }

    /// Day count.
    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    /// Hours per sample.
    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn day_index(&self) -> Vec<NaiveDate> {
        (0..self.n())
            .map(|i| self.start_date + chrono::Duration::days(i as i64))
            .collect()
    }

    pub fn is_observed(&self, t: usize, i: usize) -> bool {
        self.mask[(t, i)]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.mask.len().max(1) as f64
    }

    /// Masks one entry (value becomes 0).
    pub fn mask_entry(&mut self, t: usize, i: usize) {
        self.mask[(t, i)] = false;
        self.data[(t, i)] = 0.0;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: &self.data * factor,
            ..self.clone()
        }
    }

    /// Columns `range` as a new matrix starting at the matching date.
    pub fn days(&self, start: usize, count: usize) -> Self {
        Self {
            data: self.data.columns(start, count).into_owned(),
            mask: self.mask.columns(start, count).into_owned(),
            delta_t: self.delta_t,
            start_date: self.start_date + chrono::Duration::days(start as i64),
        }
    }

    /// Measured daily energy (kWh) from observed entries.
    pub fn daily_energy(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.delta_t
                    * (0..self.m())
                        .filter(|&t| self.mask[(t, i)])
                        .map(|t| self.data[(t, i)])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Robust signal scale: the 95th percentile of observed daily maxima.
    pub fn robust_scale(&self) -> Option<f64> {
        let maxima: Vec<f64> = (0..self.n())
            .filter_map(|i| {
                (0..self.m())
                    .filter(|&t| self.mask[(t, i)])
                    .map(|t| self.data[(t, i)])
                    .reduce(f64::max)
            })
            .collect();
        stats::quantile(&maxima, 0.95).filter(|s| *s > 0.0 && s.is_finite())
    }
}

/// Rows that ever carry daylight: observed 98th percentile at least
/// `fraction` of the robust scale. Rows with no observations are night.
pub fn daytime_rows(p: &PowerMatrix, fraction: f64) -> Vec<bool> {
    let Some(scale) = p.robust_scale() else {
        return vec![false; p.m()];
    };
    (0..p.m())
        .map(|t| {
            let row: Vec<f64> = (0..p.n())
                .filter(|&i| p.mask[(t, i)])
                .map(|i| p.data[(t, i)])
                .collect();
            stats::quantile(&row, 0.98).is_some_and(|q| q >= fraction * scale)
        })
        .collect()
}

/// Arranges a regular series into the day matrix. Missing and negative
/// readings are masked.
pub fn embed_matrix(series: &RegularSeries) -> Result<PowerMatrix, IngestError> {
    let n = series.n_days();
    if n < MIN_FIT_DAYS {
        return Err(IngestError::SpanTooShort {
            days: n,
            required: MIN_FIT_DAYS,
        });
    }
    embed_any(series)
}

/// Embedding without the two-year requirement.
pub fn embed_any(series: &RegularSeries) -> Result<PowerMatrix, IngestError> {
    let m = series.samples_per_day();
    let n = series.n_days();
    let data = DMatrix::from_iterator(m, n, series.values.iter().map(|v| v.unwrap_or(0.0)));
    let mask = DMatrix::from_iterator(m, n, series.values.iter().map(|v| matches!(v, Some(p) if *p >= 0.0)));
    PowerMatrix::new(
        data,
        mask,
        f64::from(series.interval_s) / 3600.0,
        series.start_date,
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn series(days: usize, m: usize, f: impl Fn(usize) -> Option<f64>) -> RegularSeries {
        RegularSeries {
            site_id: "s".into(),
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            interval_s: 86_400 / m as u32,
            utc_offset_minutes: 0,
            values: (0..days * m).map(f).collect(),
        }
    }

    #[test]
    fn shape_contract() {
        let s = series(730, 288, |i| Some((i % 288) as f64));
        let p = embed_matrix(&s).unwrap();
        assert_eq!((p.m(), p.n()), (288, 730));
        assert!((p.delta_t() - 300.0 / 3600.0).abs() < 1e-15);
        let days = p.day_index();
        assert_eq!(days[365] - days[0], chrono::Duration::days(365));
    }

    #[test]
    fn too_short_is_rejected() {
        let s = series(729, 24, |_| Some(1.0));
        assert!(matches!(embed_matrix(&s), Err(IngestError::SpanTooShort { days: 729, .. })));
    }

    #[test]
    fn missing_day_and_negative_readings_are_masked() {
        let s = series(730, 24, |i| match i / 24 {
            3 => None,
            5 if i % 24 == 2 => Some(-0.2),
            _ => Some(1.0),
        });
        let p = embed_matrix(&s).unwrap();
        assert!((0..24).all(|t| !p.is_observed(t, 3)));
        assert!(!p.is_observed(2, 5));
        assert_eq!(p.data()[(2, 5)], 0.0);
        assert!(p.is_observed(3, 5));
    }

    proptest! {
        #[test]
        fn flattening_columns_round_trips(vals in proptest::collection::vec(proptest::option::of(-0.5f64..3.0), 24 * 4)) {
            let s = RegularSeries { values: vals.clone(), ..series(4, 24, |_| None) };
            let p = embed_any(&s).unwrap();
            for (idx, v) in vals.iter().enumerate() {
                let (t, i) = (idx % 24, idx / 24);
                if p.is_observed(t, i) {
                    prop_assert_eq!(Some(p.data()[(t, i)]), *v);
                } else {
                    prop_assert_eq!(p.data()[(t, i)], 0.0);
                }
            }
        }
    }
}

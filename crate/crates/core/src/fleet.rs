//! Batch fits over many sites, rejection accounting, Tukey filtering and
//! comparison with external estimates.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{detect_clear_days, DEFAULT_WEIGHT_FLOOR};
use crate::ingest::{PowerMatrix, MIN_FIT_DAYS};
use crate::model::{HyperParams, ModelData};
use crate::parallel;
use crate::solver::{fit, RejectReason};
use crate::stats;

/// Sites with a smaller observed share of daytime samples are rejected.
pub const MIN_DAYTIME_FRACTION: f64 = 0.3;
pub const TUKEY_FENCE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FleetError {
    #[error("no sites given")]
    NoSites,
    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 4 values, got {0}")]
    TooFewValues(usize),
    #[error("no site was accepted")]
    NothingAccepted,
    #[error("no site ids in common with the external table")]
    EmptyJoin,
    #[error("external table: {0}")]
    ExternalTable(String),
}

/// One input site. `data` is `Err` when the site could not be loaded.
#[derive(Debug, Clone)]
pub struct FleetSite {
    pub site_id: String,
    pub data: Result<PowerMatrix, String>,
}

impl FleetSite {
    pub fn new(site_id: impl Into<String>, matrix: PowerMatrix) -> Self {
        Self {
            site_id: site_id.into(),
            data: Ok(matrix),
        }
    }

    pub fn unreadable(site_id: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            data: Err(message.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectCode {
    TooShort,
    TooSparse,
    NotConverged,
    Degenerate,
    Unreadable,
}

impl From<RejectReason> for RejectCode {
    fn from(r: RejectReason) -> Self {
        match r {
            RejectReason::TooShort => Self::TooShort,
            RejectReason::TooSparse => Self::TooSparse,
            RejectReason::NotConverged => Self::NotConverged,
            RejectReason::Degenerate => Self::Degenerate,
        }
    }
}

impl std::fmt::Display for RejectCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    /// Estimated rate in %/yr; `None` when no estimate exists.
    pub beta_percent: Option<f64>,
    pub rejected: Option<RejectCode>,
    pub detail: Option<String>,
    pub iterations: usize,
    /// Convex steps that failed to descend within `subproblem_tol`.
    pub descent_violations: usize,
    pub runtime_s: f64,
}

impl SiteRecord {
    pub fn accepted(&self) -> bool {
        self.rejected.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TukeyInterval {
    pub q1: f64,
    pub q3: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TukeyInterval {
    pub fn from_quartiles(q1: f64, q3: f64) -> Self {
        if q3 == q1 {
            return Self { q1, q3, lo: q1, hi: q3 };
        }
        // q1 − F·IQR and q3 + F·IQR, expanded; the clamp absorbs rounding
        Self {
            q1,
            q3,
            lo: ((1.0 + TUKEY_FENCE) * q1 - TUKEY_FENCE * q3).min(q1),
            hi: ((1.0 + TUKEY_FENCE) * q3 - TUKEY_FENCE * q1).max(q3),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub total: usize,
    pub included: usize,
    pub rejected: usize,
    pub rejected_by: BTreeMap<String, usize>,
    /// Median over accepted sites, %/yr.
    pub median: f64,
    /// Mean and sample standard deviation over accepted non-outlier sites.
    pub mean: f64,
    pub std: f64,
    /// Standard deviation over all accepted sites.
    pub std_before_exclusion: f64,
    pub outliers: usize,
    /// `None` with fewer than 4 accepted sites (no filtering applied).
    pub tukey: Option<TukeyInterval>,
    /// Accepted sites with a positive rate (usually a data problem).
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetResult {
    /// Sorted by site id.
    pub records: Vec<SiteRecord>,
    /// Parallel to `records`; true for accepted Tukey outliers.
    pub outlier: Vec<bool>,
}

fn fit_site(site: &FleetSite, hp: &HyperParams) -> SiteRecord {
    let start = Instant::now();
    let mut rec = SiteRecord {
        site_id: site.site_id.clone(),
        beta_percent: None,
        rejected: None,
        detail: None,
        iterations: 0,
        descent_violations: 0,
        runtime_s: 0.0,
    };
    let reject = |rec: &mut SiteRecord, code: RejectCode, detail: String| {
        rec.rejected = Some(code);
        rec.detail = Some(detail);
    };
    match &site.data {
        Err(msg) => reject(&mut rec, RejectCode::Unreadable, msg.clone()),
        Ok(p) => match usable_span(p) {
            span if span < MIN_FIT_DAYS => {
                reject(&mut rec, RejectCode::TooShort, format!("{span} usable days, need {MIN_FIT_DAYS}"))
            }
            _ => {
                let weights = detect_clear_days(p).weights(DEFAULT_WEIGHT_FLOOR);
                let coverage = ModelData::new(p, &weights).map_or(0.0, |d| d.daytime_coverage());
                if coverage < MIN_DAYTIME_FRACTION {
                    reject(
                        &mut rec,
                        RejectCode::TooSparse,
                        format!("{:.1} % of daytime samples observed", 100.0 * coverage),
                    );
                } else {
                    match fit(p, hp, &weights) {
                        Ok(r) => {
                            rec.beta_percent = Some(r.beta_percent());
                            rec.iterations = r.iterations;
                            rec.descent_violations = r.descent_violations;
                            if let Some(reason) = r.reject_reason {
                                reject(&mut rec, reason.into(), format!("{} sweeps", r.iterations));
                            }
                        }
                        Err(e) => {
                            let code = e.reason().map_or(RejectCode::Degenerate, RejectCode::from);
                            reject(&mut rec, code, e.to_string());
                        }
                    }
                }
            }
        },
    }
    rec.runtime_s = start.elapsed().as_secs_f64();
    rec
}

/// Days from the first to the last day with any observation, inclusive.
pub fn usable_span(p: &PowerMatrix) -> usize {
    let observed: Vec<usize> = (0..p.n())
        .filter(|&i| (0..p.m()).any(|t| p.is_observed(t, i)))
        .collect();
    match (observed.first(), observed.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

/// Fits every site; a failing site becomes a rejected record.
pub fn run_fleet(sites: &[FleetSite], hp: &HyperParams, workers: usize) -> Result<FleetResult, FleetError> {
    if sites.is_empty() {
        return Err(FleetError::NoSites);
    }
    hp.validate().map_err(|e| FleetError::InvalidParams(e.to_string()))?;
    let mut seen = HashSet::new();
    if let Some(dup) = sites.iter().find(|s| !seen.insert(s.site_id.as_str())) {
        return Err(FleetError::DuplicateSite(dup.site_id.clone()));
    }
    let mut records: Vec<SiteRecord> =
        parallel::install(workers, || sites.par_iter().map(|s| fit_site(s, hp)).collect());
    records.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(FleetResult::from_records(records))
}

impl FleetResult {
    /// Sorts `records` and flags Tukey outliers among the accepted ones.
    pub fn from_records(mut records: Vec<SiteRecord>) -> Self {
        records.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        let accepted: Vec<f64> = records.iter().filter(|r| r.accepted()).filter_map(|r| r.beta_percent).collect();
        let mut outlier = vec![false; records.len()];
        if let Ok(iv) = tukey_interval(&accepted) {
            for (o, r) in outlier.iter_mut().zip(&records) {
                *o = r.accepted() && r.beta_percent.is_some_and(|b| !iv.contains(b));
            }
        }
        Self { records, outlier }
    }

    pub fn accepted_rates(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.accepted())
            .filter_map(|r| r.beta_percent)
            .collect()
    }
}

/// Quartiles by the median-exclusive method: the medians of the lower and
/// upper halves, leaving out the middle value when the count is odd.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64), FleetError> {
    if values.len() < 4 {
        return Err(FleetError::TooFewValues(values.len()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let half = v.len() / 2;
    let mid = |s: &[f64]| {
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    };
    Ok((mid(&v[..half]), mid(&v[v.len() - half..])))
}

pub fn tukey_interval(values: &[f64]) -> Result<TukeyInterval, FleetError> {
    let (q1, q3) = quartiles(values)?;
    Ok(TukeyInterval::from_quartiles(q1, q3))
}

/// The 1.5·IQR interval and a mask that is true outside it.
pub fn tukey_outliers(values: &[f64]) -> Result<(TukeyInterval, Vec<bool>), FleetError> {
    let iv = tukey_interval(values)?;
    Ok((iv, values.iter().map(|v| !iv.contains(*v)).collect()))
}

pub fn summarize(result: &FleetResult) -> Result<FleetSummary, FleetError> {
    let accepted = result.accepted_rates();
    if accepted.is_empty() {
        return Err(FleetError::NothingAccepted);
    }
    let kept: Vec<f64> = result
        .records
        .iter()
        .zip(&result.outlier)
        .filter(|(r, o)| r.accepted() && !**o)
        .filter_map(|(r, _)| r.beta_percent)
        .collect();
    let mut rejected_by = BTreeMap::new();
    for r in &result.records {
        if let Some(code) = r.rejected {
            *rejected_by.entry(code.to_string()).or_insert(0) += 1;
        }
    }
    let total = result.records.len();
    Ok(FleetSummary {
        total,
        included: accepted.len(),
        rejected: total - accepted.len(),
        rejected_by,
        median: stats::median(&accepted).expect("nonempty"),
        mean: stats::mean(&kept).expect("outliers never cover every value"),
        std: stats::std_dev(&kept).expect("nonempty"),
        std_before_exclusion: stats::std_dev(&accepted).expect("nonempty"),
        outliers: result.outlier.iter().filter(|o| **o).count(),
        tukey: tukey_interval(&accepted).ok(),
        positive: accepted.iter().filter(|b| **b > 0.0).count(),
    })
}

/// `(lower edge, count)` for bins of `width` aligned to multiples of it.
pub fn histogram(values: &[f64], width: f64) -> Vec<(f64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *bins.entry((v / width).floor() as i64).or_insert(0) += 1;
    }
    bins.into_iter().map(|(b, c)| (b as f64 * width, c)).collect()
}

/// A row of an external estimate table, rates in %/yr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEstimate {
    pub site_id: String,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Reads a CSV with header `site_id,rate,lo,hi`.
pub fn read_external<R: Read>(reader: R) -> Result<Vec<ExternalEstimate>, FleetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| FleetError::ExternalTable(format!("row {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub site_id: String,
    pub scsf: f64,
    pub external: f64,
    pub lo: f64,
    pub hi: f64,
    /// `scsf − external`.
    pub delta: f64,
    pub within: bool,
}

/// Sign agreement counts; zero counts as nonnegative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrants {
    pub both_negative: usize,
    pub both_nonnegative: usize,
    /// Our estimate nonnegative, external negative.
    pub scsf_only_nonnegative: usize,
    /// Our estimate negative, external nonnegative.
    pub external_only_nonnegative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub within_fraction: f64,
    pub quadrants: Quadrants,
}

/// Joins accepted sites with `external` on site id.
pub fn compare_external(result: &FleetResult, external: &[ExternalEstimate]) -> Result<Comparison, FleetError> {
    let by_id: BTreeMap<&str, &ExternalEstimate> = external.iter().map(|e| (e.site_id.as_str(), e)).collect();
    let rows: Vec<ComparisonRow> = result
        .records
        .iter()
        .filter(|r| r.accepted())
        .filter_map(|r| {
            let b = r.beta_percent?;
            let e = by_id.get(r.site_id.as_str())?;
            Some(ComparisonRow {
                site_id: r.site_id.clone(),
                scsf: b,
                external: e.rate,
                lo: e.lo,
                hi: e.hi,
                delta: b - e.rate,
                within: e.lo <= b && b <= e.hi,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(FleetError::EmptyJoin);
    }
    let mut q = Quadrants::default();
    for r in &rows {
        match (r.scsf < 0.0, r.external < 0.0) {
            (true, true) => q.both_negative += 1,
            (false, false) => q.both_nonnegative += 1,
            (false, true) => q.scsf_only_nonnegative += 1,
            (true, false) => q.external_only_nonnegative += 1,
        }
    }
    let within = rows.iter().filter(|r| r.within).count();
    Ok(Comparison {
        within_fraction: within as f64 / rows.len() as f64,
        rows,
        quadrants: q,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn record(id: &str, beta: Option<f64>, rejected: Option<RejectCode>) -> SiteRecord {
        SiteRecord {
            site_id: id.into(),
            beta_percent: beta,
            rejected,
            detail: None,
            iterations: 5,
            descent_violations: 0,
            runtime_s: 0.0,
        }
    }

    fn accepted(values: &[f64]) -> FleetResult {
        FleetResult::from_records(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| record(&format!("s{i:03}"), Some(*v), None))
                .collect(),
        )
    }

    #[test]
    fn tukey_interval_from_quartiles() {
        let iv = TukeyInterval::from_quartiles(-1.0, -0.2);
        assert_eq!((iv.lo, iv.hi), (-2.2, 1.0));
    }

    #[test]
    fn median_exclusive_quartiles() {
        // odd count: halves {1,2,3} and {5,6,7}
        assert_eq!(quartiles(&[7.0, 1.0, 3.0, 4.0, 2.0, 6.0, 5.0]).unwrap(), (2.0, 6.0));
        // even count: halves {1,2,3,4} and {5,6,7,8}
        assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(), (2.5, 6.5));
        assert_eq!(quartiles(&[1.0, 2.0, 3.0]), Err(FleetError::TooFewValues(3)));
    }

    #[test]
    fn all_equal_values_have_no_outliers() {
        let (iv, mask) = tukey_outliers(&[-0.7; 9]).unwrap();
        assert_eq!((iv.lo, iv.hi), (-0.7, -0.7));
        assert!(mask.iter().all(|m| !m));
    }

    /// Independent scalar implementation of the filter.
    fn oracle_mask(values: &[f64]) -> Vec<bool> {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let h = n / 2;
        let med = |lo: usize, len: usize| {
            if len % 2 == 1 {
                s[lo + len / 2]
            } else {
                (s[lo + len / 2 - 1] + s[lo + len / 2]) / 2.0
            }
        };
        let q1 = med(0, h);
        let q3 = med(n - h, h);
        let r = q3 - q1;
        values.iter().map(|v| *v < q1 - 1.5 * r || *v > q3 + 1.5 * r).collect()
    }

    proptest! {
        #[test]
        fn mask_matches_oracle(values in prop::collection::vec(-5.0f64..3.0, 4..60)) {
            let (_, mask) = tukey_outliers(&values).unwrap();
            prop_assert_eq!(mask, oracle_mask(&values));
        }

        #[test]
        fn mask_is_shift_invariant(values in prop::collection::vec(-5.0f64..3.0, 4..60), c in -4.0f64..4.0) {
            // dyadic values keep the shifted arithmetic exact
            let values: Vec<f64> = values.iter().map(|v| (v * 64.0).round() / 64.0).collect();
            let c = (c * 64.0).round() / 64.0;
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            prop_assert_eq!(tukey_outliers(&values).unwrap().1, tukey_outliers(&shifted).unwrap().1);
        }
    }

    #[test]
    fn summary_of_identical_values() {
        let s = summarize(&accepted(&[-1.0, -1.0, -1.0])).unwrap();
        assert_eq!((s.median, s.mean, s.std), (-1.0, -1.0, 0.0));
        assert!(s.tukey.is_none());
    }

    #[test]
    fn extreme_value_is_excluded_before_std() {
        let mut v: Vec<f64> = (0..20).map(|i| -0.8 + 0.05 * (i as f64 - 10.0)).collect();
        v.push(12.0);
        let r = accepted(&v);
        let s = summarize(&r).unwrap();
        assert_eq!(s.outliers, 1);
        assert!(r.outlier[20]);
        assert!(s.std < s.std_before_exclusion);
        assert!((s.mean - stats::mean(&v[..20]).unwrap()).abs() < 1e-12);
        assert_eq!(s.positive, 1);
    }

    #[test]
    fn rejection_accounting_and_nothing_accepted() {
        let r = FleetResult::from_records(vec![
            record("b", None, Some(RejectCode::TooShort)),
            record("a", Some(-0.5), None),
            record("c", Some(-0.4), Some(RejectCode::NotConverged)),
        ]);
        assert_eq!(r.records[0].site_id, "a");
        let s = summarize(&r).unwrap();
        assert_eq!((s.total, s.included, s.rejected), (3, 1, 2));
        assert_eq!(s.rejected_by["TooShort"], 1);
        let none = FleetResult::from_records(vec![record("x", None, Some(RejectCode::TooSparse))]);
        assert_eq!(summarize(&none), Err(FleetError::NothingAccepted));
    }

    #[test]
    fn summary_is_independent_of_record_order() {
        let v: Vec<f64> = (0..30).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.173).collect();
        let a = accepted(&v);
        let mut recs = a.records.clone();
        recs.reverse();
        let b = FleetResult::from_records(recs);
        assert_eq!(summarize(&a).unwrap(), summarize(&b).unwrap());
    }

    #[test]
    fn self_join_is_fully_within() {
        let r = accepted(&[-1.0, -0.5, 0.3, -2.0]);
        let ext: Vec<ExternalEstimate> = r
            .records
            .iter()
            .map(|s| {
                let b = s.beta_percent.unwrap();
                ExternalEstimate {
                    site_id: s.site_id.clone(),
                    rate: b,
                    lo: b - 0.5,
                    hi: b + 0.5,
                }
            })
            .collect();
        let c = compare_external(&r, &ext).unwrap();
        assert_eq!(c.within_fraction, 1.0);
        assert_eq!(c.quadrants.both_negative, 3);
        assert_eq!(c.quadrants.both_nonnegative, 1);
        let other = vec![ExternalEstimate {
            site_id: "zzz".into(),
            rate: 0.0,
            lo: -1.0,
            hi: 1.0,
        }];
        assert_eq!(compare_external(&r, &other), Err(FleetError::EmptyJoin));
    }

    #[test]
    fn quadrants_match_scalar_tally() {
        let ours = [-1.0, 0.4, -0.2, 0.0, -3.0, 0.7];
        let theirs = [-0.5, -0.1, 0.3, -0.2, -1.0, 0.9];
        let r = accepted(&ours);
        let ext: Vec<ExternalEstimate> = theirs
            .iter()
            .enumerate()
            .map(|(i, t)| ExternalEstimate {
                site_id: format!("s{i:03}"),
                rate: *t,
                lo: t - 0.25,
                hi: t + 0.25,
            })
            .collect();
        let c = compare_external(&r, &ext).unwrap();
        let mut tally = [0usize; 4];
        let mut within = 0;
        for (a, b) in ours.iter().zip(&theirs) {
            let idx = match (*a >= 0.0, *b >= 0.0) {
                (false, false) => 0,
                (true, true) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            tally[idx] += 1;
            if (a - b).abs() <= 0.25 {
                within += 1;
            }
        }
        let q = c.quadrants;
        assert_eq!(
            [q.both_negative, q.both_nonnegative, q.scsf_only_nonnegative, q.external_only_nonnegative],
            tally
        );
        assert!((c.within_fraction - within as f64 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn external_table_parses_and_reports_bad_rows() {
        let ok = "site_id,rate,lo,hi\na,-0.5,-1.0,0.0\n b , 0.1 ,-0.2,0.4\n";
        let rows = read_external(ok.as_bytes()).unwrap();
        assert_eq!(rows[1].site_id, "b");
        assert!(read_external("site_id,rate,lo,hi\na,x,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[-1.0, -0.9, -0.1, 0.05, 0.2], 0.5);
        assert_eq!(h, vec![(-1.0, 2), (-0.5, 1), (0.0, 2)]);
    }

    #[test]
    fn empty_fleet() {
        assert_eq!(run_fleet(&[], &HyperParams::default(), 1).unwrap_err(), FleetError::NoSites);
    }
}

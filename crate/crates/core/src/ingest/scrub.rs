use serde::{Deserialize, Serialize};

use super::{daytime_rows, PowerMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScrubConfig {
    /// Runs of an identical nonzero daytime reading lasting longer than
    /// this many hours are treated as a stuck sensor.
    pub stuck_hours: f64,
    /// Days whose observed fraction of daytime samples falls below this are
    /// masked entirely.
    pub min_day_coverage: f64,
    /// Rows are daytime when their 98th percentile reaches this fraction of
    /// the robust signal scale.
    pub daytime_fraction: f64,
}

impl Default for ScrubConfig {
    fn default() -> Self {
        Self {
            stuck_hours: 2.0,
            min_day_coverage: 0.6,
            daytime_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub negative_entries: usize,
    pub stuck_entries: usize,
    pub low_coverage_days: usize,
    pub low_coverage_entries: usize,
}

impl ScrubReport {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

/// Masks negative readings, stuck runs, and poorly covered days. Only ever
/// removes observations.
pub fn scrub(matrix: &PowerMatrix, rules: &ScrubConfig) -> (PowerMatrix, ScrubReport) {
    let mut out = matrix.clone();
    let mut report = ScrubReport::default();
    let (m, n) = (out.m(), out.n());

    for i in 0..n {
        for t in 0..m {
            if out.is_observed(t, i) && out.data()[(t, i)] < 0.0 {
                out.mask_entry(t, i);
                report.negative_entries += 1;
            }
        }
    }

    let daytime = daytime_rows(&out, rules.daytime_fraction);
    let floor = out.robust_scale().unwrap_or(0.0) * rules.daytime_fraction;
    let min_run = ((rules.stuck_hours / out.delta_t()).floor() as usize + 1).max(3);

    for i in 0..n {
        let mut t = 0;
        while t < m {
            let v = out.data()[(t, i)];
            if !(daytime[t] && out.is_observed(t, i) && v > floor) {
                t += 1;
                continue;
            }
            let mut end = t + 1;
            while end < m && daytime[end] && out.is_observed(end, i) && out.data()[(end, i)] == v {
                end += 1;
            }
            if end - t >= min_run {
                for s in t..end {
                    out.mask_entry(s, i);
                }
                report.stuck_entries += end - t;
            }
            t = end;
        }
    }

    let n_day_rows = daytime.iter().filter(|&&d| d).count();
    if n_day_rows > 0 {
        for i in 0..n {
            let observed = (0..m).filter(|&t| daytime[t] && out.is_observed(t, i)).count();
            let coverage = observed as f64 / n_day_rows as f64;
            if coverage < rules.min_day_coverage {
                let remaining = (0..m).filter(|&t| out.is_observed(t, i)).count();
                if remaining > 0 || observed > 0 {
                    report.low_coverage_days += 1;
                    report.low_coverage_entries += remaining;
                }
                for t in 0..m {
                    out.mask_entry(t, i);
                }
            }
        }
    }
    (out, report)
}

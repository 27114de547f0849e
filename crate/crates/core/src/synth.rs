//! Deterministic synthetic PV sites with known degradation.
//!
//! The clear-sky profile follows the sun over a 365-day year at a fixed
//! latitude, so the undegraded signal is exactly periodic in the day index.
//! Degradation compounds as `(1 + β)^(day / 365)`, which makes the energy
//! ratio of any two days one year apart exactly `1 + β`.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{PowerMatrix, RegularSeries};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid scenario: {0}")]
pub struct InvalidScenario(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Fractional change per year.
    pub beta: f64,
    pub days: usize,
    pub interval_s: u32,
    /// Fraction of days that are cloudy.
    pub cloud_fraction: f64,
    /// Standard deviation of the multiplicative per-sample noise.
    pub noise: f64,
    pub capacity_kw: f64,
    pub latitude_deg: f64,
    /// Multiplier applied to the first 365 days.
    pub capacity_shift: Option<f64>,
    /// Fraction of days with no data at all.
    pub missing_days: f64,
    pub start_date: NaiveDate,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            beta: -0.01,
            days: 3 * 365,
            interval_s: 900,
            cloud_fraction: 0.4,
            noise: 0.02,
            capacity_kw: 5.0,
            latitude_deg: 35.0,
            capacity_shift: None,
            missing_days: 0.0,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date"),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), InvalidScenario> {
        let bad = |m: String| Err(InvalidScenario(m));
        if !(self.beta > -1.0 && self.beta.is_finite()) {
            return bad(format!("beta = {}", self.beta));
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.interval_s == 0 || 86_400 % self.interval_s != 0 {
            return bad(format!("interval {} s must divide 86400", self.interval_s));
        }
        for (name, v) in [("cloud_fraction", self.cloud_fraction), ("missing_days", self.missing_days)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return bad(format!("noise = {}", self.noise));
        }
        if !(self.capacity_kw > 0.0 && self.capacity_kw.is_finite()) {
            return bad(format!("capacity_kw = {}", self.capacity_kw));
        }
        if !(self.latitude_deg.abs() < 60.0) {
            return bad(format!("latitude {} outside ±60°", self.latitude_deg));
        }
        if let Some(s) = self.capacity_shift {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("capacity_shift = {s}"));
            }
        }
        Ok(())
    }
}

/// Generator ground truth for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub site_id: String,
    pub seed: u64,
    pub beta: f64,
    /// Per day: no cloud attenuation was applied.
    pub clear: Vec<bool>,
    /// Per day: all samples were withheld.
    pub missing: Vec<bool>,
    pub scenario: Scenario,
}

#[derive(Debug, Clone)]
pub struct SyntheticSite {
    pub series: RegularSeries,
    pub truth: Truth,
}

impl SyntheticSite {
    /// The day matrix, without the two-year length check.
    pub fn matrix(&self) -> PowerMatrix {
        crate::ingest::embed_any(&self.series).expect("generator output is well formed")
    }
}

/// Undegraded clear-sky power (kW) at `hour` (local solar time) on day
/// `day` of a 365-day year.
pub fn clear_sky_power(s: &Scenario, day: usize, hour: f64) -> f64 {
    let lat = s.latitude_deg.to_radians();
    let doy = (day % 365) as f64;
    let decl = 23.45f64.to_radians() * (2.0 * std::f64::consts::PI * (284.0 + doy) / 365.0).sin();
    let h = (hour - 12.0) * 15f64.to_radians();
    let cos_z = lat.sin() * decl.sin() + lat.cos() * decl.cos() * h.cos();
    if cos_z <= 0.0 {
        0.0
    } else {
        s.capacity_kw * cos_z.powf(1.15)
    }
}

/// Generates one site. Output depends only on `(scenario, seed)`.
pub fn generate(scenario: &Scenario, seed: u64, site_id: &str) -> Result<SyntheticSite, InvalidScenario> {
    scenario.validate()?;
    let s = scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = (86_400 / s.interval_s) as usize;
    let dt_h = f64::from(s.interval_s) / 3600.0;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut values = Vec::with_capacity(m * s.days);
    let mut clear = Vec::with_capacity(s.days);
    let mut missing = Vec::with_capacity(s.days);
    for day in 0..s.days {
        let is_missing = rng.random::<f64>() < s.missing_days;
        let cloudy = rng.random::<f64>() < s.cloud_fraction;
        let mut factor = s.capacity_shift.filter(|_| day < 365).unwrap_or(1.0);
        factor *= (1.0 + s.beta).powf(day as f64 / 365.0);
        // cloudy days: a ragged attenuation around a random daily mean
        let level = 0.15 + 0.6 * rng.random::<f64>();
        let mut shade = level;
        for t in 0..m {
            let hour = (t as f64 + 0.5) * dt_h;
            let base = clear_sky_power(s, day, hour) * factor;
            let eps = s.noise * unit.sample(&mut rng);
            let mut v = base * (1.0 + eps);
            if cloudy {
                let jump: f64 = rng.random();
                shade = if jump < 0.3 {
                    (level + 0.5 * (rng.random::<f64>() - 0.5)).clamp(0.02, 1.0)
                } else {
                    0.7 * shade + 0.3 * level
                };
                v *= shade;
            }
            values.push((!is_missing).then_some(v.max(0.0)));
        }
        clear.push(!cloudy);
        missing.push(is_missing);
    }
    Ok(SyntheticSite {
        series: RegularSeries {
            site_id: site_id.to_string(),
            start_date: s.start_date,
            interval_s: s.interval_s,
            utc_offset_minutes: 0,
            values,
        },
        truth: Truth {
            site_id: site_id.to_string(),
            seed,
            beta: s.beta,
            clear,
            missing,
            scenario: s.clone(),
        },
    })
}

/// `count` sites with rates drawn from `normal(scenario.beta, beta_std)`.
/// Site `i` is `site_{i:03}`; its seed and rate depend only on `seed` and `i`.
pub fn generate_fleet(
    scenario: &Scenario,
    count: usize,
    beta_std: f64,
    seed: u64,
) -> Result<Vec<SyntheticSite>, InvalidScenario> {
    if !(beta_std >= 0.0 && beta_std.is_finite()) {
        return Err(InvalidScenario(format!("beta_std = {beta_std}")));
    }
    let spread = Normal::new(scenario.beta, beta_std).map_err(|e| InvalidScenario(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let site_seed: u64 = rng.random();
            let beta = spread.sample(&mut rng);
            let s = Scenario { beta, ..scenario.clone() };
            generate(&s, site_seed, &format!("site_{i:03}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let s = Scenario { days: 20, ..Default::default() };
        let a = generate(&s, 1, "a").unwrap();
        let b = generate(&s, 1, "a").unwrap();
        let c = generate(&s, 2, "a").unwrap();
        assert_eq!(a.series, b.series);
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn noiseless_clear_signal_degrades_exactly() {
        let s = Scenario {
            days: 800,
            cloud_fraction: 0.0,
            noise: 0.0,
            beta: -0.026,
            ..Default::default()
        };
        let p = generate(&s, 3, "x").unwrap().matrix();
        let e = p.daily_energy();
        for i in [0, 100, 400] {
            assert!((e[i + 365] / e[i] - 0.974).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_shift_scales_first_year() {
        let base = Scenario { days: 400, ..Default::default() };
        let shifted = Scenario { capacity_shift: Some(0.7), ..base.clone() };
        let a = generate(&base, 5, "x").unwrap().series.values;
        let b = generate(&shifted, 5, "x").unwrap().series.values;
        let m = 96;
        for (idx, (x, y)) in a.iter().zip(&b).enumerate() {
            let (x, y) = (x.unwrap(), y.unwrap());
            if idx / m < 365 {
                assert!((y - 0.7 * x).abs() <= 1e-12 * x.abs());
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn fleet_rates_follow_the_requested_spread() {
        let s = Scenario { days: 2, ..Default::default() };
        let fleet = generate_fleet(&s, 400, 0.005, 9).unwrap();
        let betas: Vec<f64> = fleet.iter().map(|f| f.truth.beta).collect();
        let mean = crate::stats::mean(&betas).unwrap();
        let sd = crate::stats::std_dev(&betas).unwrap();
        assert!((mean + 0.01).abs() < 0.001, "{mean}");
        assert!((sd - 0.005).abs() < 0.001, "{sd}");
        assert_eq!(fleet[7].truth.site_id, "site_007");
        let again = generate_fleet(&s, 8, 0.005, 9).unwrap();
        assert_eq!(again[7].series, fleet[7].series);
    }

    #[test]
    fn invalid_scenarios() {
        assert!(generate(&Scenario { interval_s: 7, ..Default::default() }, 1, "x").is_err());
        assert!(generate(&Scenario { cloud_fraction: 1.5, ..Default::default() }, 1, "x").is_err());
        assert!(generate(&Scenario { beta: -1.0, ..Default::default() }, 1, "x").is_err());
    }
}

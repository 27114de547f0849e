use scsf_core::baseline::{self, DEFAULT_CLEAR_THRESHOLD, DEFAULT_WEIGHT_FLOOR};
use scsf_core::fleet::{self, FleetSite, RejectCode};
use scsf_core::ingest::{self, ColumnSpec};
use scsf_core::synth::{self, Scenario};
use scsf_core::tuning::{self, GridSpec, SweepSpec};
use scsf_core::{fit, HyperParams, PowerMatrix};

fn hourly(beta: f64, days: usize, seed: u64) -> PowerMatrix {
    let s = Scenario {
        beta,
        days,
        interval_s: 3600,
        ..Scenario::default()
    };
    synth::generate(&s, seed, "site").unwrap().matrix()
}

fn weights(p: &PowerMatrix) -> Vec<f64> {
    baseline::detect_clear_days(p).weights(DEFAULT_WEIGHT_FLOOR)
}

#[test]
fn csv_round_trip_reproduces_the_series() {
    let s = Scenario {
        days: 30,
        missing_days: 0.1,
        ..Scenario::default()
    };
    let site = synth::generate(&s, 3, "a").unwrap();
    let series = &site.series;
    let mut text = String::from("timestamp,power_kw\n");
    for (idx, rec) in series.to_raw().records.iter().enumerate() {
        let v = series.values[idx].map_or_else(String::new, |x| format!("{x}"));
        text += &format!("{},{v}\n", rec.timestamp.format("%Y-%m-%dT%H:%M:%S"));
    }
    let raw = ingest::parse_power_csv(text.as_bytes(), &ColumnSpec::default(), "a").unwrap();
    let back = ingest::regularize(&raw, series.interval_s, 0).unwrap();
    assert_eq!(back.start_date, series.start_date);
    // trailing withheld days carry no timestamps after them and are not recoverable
    assert_eq!(&back.values[..], &series.values[..back.values.len()]);
    assert!(series.values[back.values.len()..].iter().all(Option::is_none));
}

#[test]
fn cloud_free_days_are_all_clear() {
    let s = Scenario {
        days: 60,
        cloud_fraction: 0.0,
        ..Scenario::default()
    };
    let p = synth::generate(&s, 11, "c").unwrap().matrix();
    let score = baseline::detect_clear_days_with(&p, DEFAULT_CLEAR_THRESHOLD);
    assert_eq!(score.clear_count(), 60, "scores {:?}", score.score);
}

#[test]
fn single_point_grid_equals_a_direct_fit() {
    let p = hourly(-0.01, 730, 21);
    let w = weights(&p);
    let hp = HyperParams::default();
    let direct = fit(&p, &hp, &w).unwrap();
    let runs = tuning::grid_search(&p, &w, &GridSpec::single(&hp), &hp, 1).unwrap();
    assert_eq!(runs.len(), 1);
    let via_grid = runs[0].outcome.as_ref().unwrap();
    assert_eq!(via_grid.beta, direct.beta);
    assert_eq!(via_grid.iterations, direct.iterations);
}

#[test]
fn tuning_is_deterministic_across_worker_counts() {
    let p = hourly(-0.005, 730, 22);
    let w = weights(&p);
    let hp = HyperParams::default();
    let spec = SweepSpec {
        step: 0.05,
        ..SweepSpec::default()
    };
    let one = tuning::tau_sweep("s", &p, &w, &spec, &hp, 1).unwrap();
    let three = tuning::tau_sweep("s", &p, &w, &spec, &hp, 3).unwrap();
    assert_eq!(one.curve, three.curve);
    assert_eq!(one.curve.taus, vec![0.8, 0.85, 0.9]);
}

#[test]
fn fleet_rejects_with_reasons_and_is_deterministic() {
    let sites = vec![
        FleetSite::new("b", hourly(-0.01, 730, 31)),
        FleetSite::new("a", hourly(-0.004, 730, 32)),
        FleetSite::new("short", hourly(-0.01, 500, 33)),
        FleetSite::unreadable("broken", "no parseable rows"),
    ];
    let hp = HyperParams::default();
    let one = fleet::run_fleet(&sites, &hp, 1).unwrap();
    let two = fleet::run_fleet(&sites, &hp, 2).unwrap();
    let strip = |r: &fleet::FleetResult| {
        r.records
            .iter()
            .map(|x| (x.site_id.clone(), x.beta_percent, x.rejected, x.iterations))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&one), strip(&two));
    let ids: Vec<&str> = one.records.iter().map(|r| r.site_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "broken", "short"]);
    assert_eq!(one.records[2].rejected, Some(RejectCode::Unreadable));
    assert_eq!(one.records[3].rejected, Some(RejectCode::TooShort));
    let summary = fleet::summarize(&one).unwrap();
    assert_eq!((summary.total, summary.included, summary.rejected), (4, 2, 2));
    assert!(summary.tukey.is_none());
    for r in &one.records[..2] {
        assert!(r.accepted());
    }
}

#[test]
fn sparse_site_is_rejected() {
    let mut p = hourly(-0.01, 730, 41);
    // first and last days stay observed so the span is still two years
    let n = p.n();
    for i in 0..n {
        if i % 4 != 0 && i != n - 1 {
            for t in 0..p.m() {
                p.mask_entry(t, i);
            }
        }
    }
    let result = fleet::run_fleet(&[FleetSite::new("x", p)], &HyperParams::default(), 1).unwrap();
    assert_eq!(result.records[0].rejected, Some(RejectCode::TooSparse));
}

//! Fixtures shared by the benchmarks.

use scsf_core::solver::sparse::CsrMatrix;
use scsf_core::solver::{ConvexSubproblem, PinballTerms};
use scsf_core::synth::{self, Scenario};
use scsf_core::PowerMatrix;

/// Synthetic site with `days` days sampled every `interval_s` seconds.
pub fn site(days: usize, interval_s: u32, seed: u64) -> PowerMatrix {
    let s = Scenario {
        days,
        interval_s,
        ..Scenario::default()
    };
    synth::generate(&s, seed, "bench").expect("valid scenario").matrix()
}

/// Quantile trend filter on `n` points: pinball fit to a noisy sine plus a
/// second-difference penalty with weight `mu`.
pub fn trend_filter(n: usize, tau: f64, mu: f64) -> ConvexSubproblem {
    let mut trip = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let row = [(i - 1, 1.0), (i, -2.0), (i + 1, 1.0)];
        for &(a, va) in &row {
            for &(b, vb) in &row {
                trip.push((a, b, 2.0 * mu * va * vb));
            }
        }
    }
    let offsets = (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            (6.0 * x).sin() + 0.3 * ((i * 7919 % 101) as f64 / 101.0 - 0.5)
        })
        .collect();
    let mut p = ConvexSubproblem::new(n);
    p.quadratic = CsrMatrix::from_triplets(n, n, &trip);
    p.pinball = Some(PinballTerms {
        rows: CsrMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>()),
        offsets,
        weights: vec![1.0; n],
        tau,
    });
    p
}

use nalgebra::DMatrix;

use super::sparse::CsrMatrix;
use super::subsolve::{self, ConvexSubproblem, EqualityConstraints, PinballTerms, SubsolveError, SubsolveSettings, WarmStart};
use super::SolverError;
use crate::model::{self, DegradationState, Factorization, HyperParams, ModelData, YEAR_LAG};

/// Weight of the proximal term that anchors each step at its start. It keeps
/// factor entries without data or curvature from drifting, and vanishes at a
/// fixed point.
pub const PROXIMAL: f64 = 1e-6;

/// Objective bookkeeping for one convex step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Objective at the feasible starting point of the step.
    pub objective_before: f64,
    /// Objective of the subsolver's answer.
    pub objective_after: f64,
    pub iterations: usize,
    /// The subsolver hit its iteration budget before its tolerance.
    pub stalled: bool,
}

impl StepReport {
    /// Relative increase of the objective over the step (≤ 0 for descent).
    pub fn relative_increase(&self) -> f64 {
        (self.objective_after - self.objective_before) / self.objective_before.abs().max(1e-300)
    }
}

#[derive(Debug, Clone)]
pub struct LeftStep {
    pub left: DMatrix<f64>,
    pub report: StepReport,
}

#[derive(Debug, Clone)]
pub struct RightStep {
    pub right: DMatrix<f64>,
    /// `None` when no day has a partner one year later.
    pub beta: Option<f64>,
    pub report: StepReport,
}

/// Minimizes over the left factor with the right factor fixed.
///
/// With `R` fixed the daily energies are `c(L)ᵀ R[:, i]` where
/// `c = Δt · Σ_daytime L`. The degradation constraint then pins `c`, so the
/// step keeps the daytime column sums of `L` at their current values.
pub fn solve_left_step(
    data: &ModelData,
    f: &Factorization,
    hp: &HyperParams,
    state: &DegradationState,
) -> Result<LeftStep, SolverError> {
    left_step(data, f, hp, state, None).map(|(s, _)| s)
}

/// Minimizes over `(R, β)` with the left factor fixed, subject to
/// `cᵀ(R[:, i+365] − R[:, i]) = β · d_prevᵢ` on the constrained days.
pub fn solve_right_step(
    data: &ModelData,
    f: &Factorization,
    hp: &HyperParams,
    state: &DegradationState,
) -> Result<RightStep, SolverError> {
    right_step(data, f, hp, state, None).map(|(s, _)| s)
}

fn settings(hp: &HyperParams) -> SubsolveSettings {
    SubsolveSettings {
        max_iters: 8000,
        ..SubsolveSettings::with_tol(hp.subproblem_tol)
    }
}

/// Runs the subsolver; a looser answer that fails to descend is retried from
/// its own iterate at a tighter tolerance.
fn run(
    p: &ConvexSubproblem,
    hp: &HyperParams,
    warm: Option<&WarmStart>,
    before: f64,
    evaluate: &dyn Fn(&[f64]) -> Result<f64, SolverError>,
) -> Result<(Vec<f64>, StepReport, WarmStart), SolverError> {
    let mut s = settings(hp);
    let mut warm = warm.cloned();
    let mut iterations = 0;
    let mut last = None;
    for _ in 0..3 {
        let (sol, stalled) = match subsolve::solve(p, &s, warm.as_ref()) {
            Ok(sol) => (sol, false),
            Err(SubsolveError::MaxIterations(sol)) => (*sol, true),
            Err(e) => return Err(e.into()),
        };
        iterations += sol.iterations;
        let after = evaluate(&sol.x)?;
        let report = StepReport {
            objective_before: before,
            objective_after: after,
            iterations,
            stalled,
        };
        let done = report.relative_increase() <= 0.1 * hp.subproblem_tol;
        warm = Some(sol.warm.clone());
        last = Some((sol.x, report, sol.warm));
        if done {
            break;
        }
        s.tol *= 0.01;
    }
    Ok(last.expect("at least one attempt"))
}

pub(crate) fn left_step(
    data: &ModelData,
    f: &Factorization,
    hp: &HyperParams,
    state: &DegradationState,
    warm: Option<&WarmStart>,
) -> Result<(LeftStep, WarmStart), SolverError> {
    let (m, n, k) = (data.m(), data.n(), f.rank());
    let nv = m * k;
    let idx = |t: usize, j: usize| t * k + j;

    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        let w = data.weights[i];
        if w <= 0.0 {
            continue;
        }
        for t in 0..m {
            if data.in_loss[(t, i)] {
                rows.push((0..k).map(|j| (idx(t, j), f.right[(j, i)])).collect::<Vec<_>>());
                offsets.push(data.values[(t, i)]);
                weights.push(w);
            }
        }
    }

    let mut trip = Vec::new();
    if m >= 3 {
        for j in 0..k {
            for t in 1..m - 1 {
                add_outer(&mut trip, &[(idx(t - 1, j), 1.0), (idx(t, j), -2.0), (idx(t + 1, j), 1.0)], 2.0 * hp.mu_left);
            }
        }
    }

    let mut p = ConvexSubproblem::new(nv);
    add_proximal(&mut trip, &mut p.linear, |t, j| f.left[(t, j)], m, k);
    p.quadratic = CsrMatrix::from_triplets(nv, nv, &trip);
    if !rows.is_empty() {
        p.pinball = Some(PinballTerms {
            rows: CsrMatrix::from_rows(nv, rows),
            offsets,
            weights,
            tau: hp.tau,
        });
    }
    if !state.constrained_indices()?.is_empty() {
        let cons = (0..k).map(|j| (0..m).filter(|&t| data.daytime[t]).map(|t| (idx(t, j), 1.0)).collect::<Vec<_>>());
        let rhs = (0..k)
            .map(|j| (0..m).filter(|&t| data.daytime[t]).map(|t| f.left[(t, j)]).sum())
            .collect();
        p.equality = Some(EqualityConstraints {
            matrix: CsrMatrix::from_rows(nv, cons),
            rhs,
        });
    }

    let before = model::objective(data, f, hp, state)?.total();
    let to_left = |x: &[f64]| DMatrix::from_fn(m, k, |t, j| x[idx(t, j)]);
    let evaluate = |x: &[f64]| -> Result<f64, SolverError> {
        let g = Factorization { left: to_left(x), right: f.right.clone() };
        Ok(model::objective(data, &g, hp, state)?.total())
    };
    let warm = warm.cloned().or_else(|| Some(cold_start(&p, |t, j| f.left[(t, j)], m, k)));
    let (x, report, warm) = run(&p, hp, warm.as_ref(), before, &evaluate)?;
    Ok((LeftStep { left: to_left(&x), report }, warm))
}

/// Warm start from the current factor with the dual at zero.
fn cold_start(p: &ConvexSubproblem, at: impl Fn(usize, usize) -> f64, outer: usize, k: usize) -> WarmStart {
    let mut x = vec![0.0; p.n_vars];
    for a in 0..outer {
        for j in 0..k {
            x[a * k + j] = at(a, j);
        }
    }
    let np = p.n_pinball();
    let mut fitted = vec![0.0; np];
    if let Some(pb) = &p.pinball {
        pb.rows.mul_vec(&x, &mut fitted);
    }
    WarmStart {
        x,
        fitted,
        dual: vec![0.0; np],
        rho: SubsolveSettings::default().rho,
    }
}

/// Adds `PROXIMAL/2 · ‖x − x₀‖²` over the factor entries, with `x₀` read
/// through `at(outer, j)`.
fn add_proximal(
    trip: &mut Vec<(usize, usize, f64)>,
    linear: &mut [f64],
    at: impl Fn(usize, usize) -> f64,
    outer: usize,
    k: usize,
) {
    for a in 0..outer {
        for j in 0..k {
            let i = a * k + j;
            trip.push((i, i, PROXIMAL));
            linear[i] -= PROXIMAL * at(a, j);
        }
    }
}

fn add_outer(trip: &mut Vec<(usize, usize, f64)>, a: &[(usize, f64)], scale: f64) {
    for &(r, vr) in a {
        for &(c, vc) in a {
            trip.push((r, c, scale * vr * vc));
        }
    }
}

pub(crate) fn right_step(
    data: &ModelData,
    f: &Factorization,
    hp: &HyperParams,
    state: &DegradationState,
    warm: Option<&WarmStart>,
) -> Result<(RightStep, WarmStart), SolverError> {
    let (m, n, k) = (data.m(), data.n(), f.rank());
    let constrained = state.constrained_indices()?;
    let free_beta = hp.fixed_beta.is_none() && !constrained.is_empty();
    let nv = n * k + usize::from(free_beta);
    let beta_var = n * k;
    let idx = |i: usize, j: usize| i * k + j;

    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        let w = data.weights[i];
        if w <= 0.0 {
            continue;
        }
        for t in 0..m {
            if data.in_loss[(t, i)] {
                rows.push((0..k).map(|j| (idx(i, j), f.left[(t, j)])).collect::<Vec<_>>());
                offsets.push(data.values[(t, i)]);
                weights.push(w);
            }
        }
    }

    let mut trip = Vec::new();
    if n >= 3 {
        for j in 0..k {
            for i in 1..n - 1 {
                add_outer(&mut trip, &[(idx(i - 1, j), 1.0), (idx(i, j), -2.0), (idx(i + 1, j), 1.0)], 2.0 * hp.mu_right);
            }
        }
    }
    let gamma = state.gamma();
    let c = data.energy_weights(&f.left);
    if n > YEAR_LAG && hp.mu_year > 0.0 {
        let proj = model::energy_projector(&c);
        let pair = [(YEAR_LAG, 1.0), (0, -gamma)];
        for i in 0..n - YEAR_LAG {
            for &(da, va) in &pair {
                for &(db, vb) in &pair {
                    for a in 0..k {
                        for b in 0..k {
                            let v = 2.0 * hp.mu_year * va * vb * proj[(a, b)];
                            trip.push((idx(i + da, a), idx(i + db, b), v));
                        }
                    }
                }
            }
        }
    }

    let mut p = ConvexSubproblem::new(nv);
    if !rows.is_empty() {
        p.pinball = Some(PinballTerms {
            rows: CsrMatrix::from_rows(nv, rows),
            offsets,
            weights,
            tau: hp.tau,
        });
    }

    if !constrained.is_empty() && c.iter().all(|v| *v == 0.0) {
        return Err(SolverError::Invalid("left factor carries no daytime energy".into()));
    }
    let mut start_right = f.right.clone();
    let mut start_beta = hp.fixed_beta.unwrap_or(state.beta);
    if !constrained.is_empty() {
        let fixed = hp.fixed_beta;
        let cons = constrained.iter().map(|&i| {
            let mut row: Vec<(usize, f64)> = (0..k).map(|j| (idx(i, j), -c[j])).collect();
            row.extend((0..k).map(|j| (idx(i + YEAR_LAG, j), c[j])));
            if free_beta {
                row.push((beta_var, -state.d_prev[i]));
            }
            row
        });
        let rhs = constrained
            .iter()
            .map(|&i| fixed.map_or(0.0, |b| b * state.d_prev[i]))
            .collect();
        p.equality = Some(EqualityConstraints {
            matrix: CsrMatrix::from_rows(nv, cons),
            rhs,
        });

        let energies: Vec<f64> = (0..n)
            .map(|i| (0..k).map(|j| c[j] * f.right[(j, i)]).sum())
            .collect();
        let (projected, beta) = project_energies(&energies, &state.d_prev, &constrained, fixed);
        let cc: f64 = c.iter().map(|v| v * v).sum();
        for i in 0..n {
            let shift = (projected[i] - energies[i]) / cc;
            for j in 0..k {
                start_right[(j, i)] += shift * c[j];
            }
        }
        start_beta = beta;
    }

    add_proximal(&mut trip, &mut p.linear, |i, j| start_right[(j, i)], n, k);
    p.quadratic = CsrMatrix::from_triplets(nv, nv, &trip);
    let start = Factorization { left: f.left.clone(), right: start_right };
    let before = model::objective(data, &start, hp, state)?.total();
    let to_right = |x: &[f64]| DMatrix::from_fn(k, n, |j, i| x[idx(i, j)]);
    let evaluate = |x: &[f64]| -> Result<f64, SolverError> {
        let g = Factorization { left: f.left.clone(), right: to_right(x) };
        Ok(model::objective(data, &g, hp, state)?.total())
    };
    let warm = match warm {
        Some(w) if w.x.len() == nv => w.clone(),
        _ => {
            let mut w = cold_start(&p, |i, j| start.right[(j, i)], n, k);
            if free_beta {
                w.x[beta_var] = start_beta;
            }
            w
        }
    };
    let (x, report, warm) = run(&p, hp, Some(&warm), before, &evaluate)?;
    let beta = if constrained.is_empty() {
        None
    } else if free_beta {
        Some(x[beta_var])
    } else {
        hp.fixed_beta
    };
    Ok((
        RightStep {
            right: to_right(&x),
            beta,
            report,
        },
        warm,
    ))
}

/// Closest energy vector (least squares) that satisfies the pairwise
/// constraints for some β. Constrained pairs link days into chains
/// `i, i+365, i+730, …`; along a chain the energies are `α + β·h` with `h`
/// the running sum of denominators.
pub(crate) fn project_energies(
    energies: &[f64],
    d_prev: &[f64],
    constrained: &[usize],
    fixed_beta: Option<f64>,
) -> (Vec<f64>, f64) {
    let n = energies.len();
    let mut linked = vec![false; n];
    for &i in constrained {
        linked[i] = true;
    }
    let mut chains: Vec<Vec<(usize, f64)>> = Vec::new();
    for start in 0..n {
        let has_pred = start >= YEAR_LAG && linked[start - YEAR_LAG];
        if has_pred || !linked[start] {
            continue;
        }
        let mut chain = vec![(start, 0.0)];
        let (mut i, mut h) = (start, 0.0);
        while linked[i] {
            h += d_prev[i];
            i += YEAR_LAG;
            chain.push((i, h));
        }
        chains.push(chain);
    }

    let centered = |chain: &[(usize, f64)]| {
        let len = chain.len() as f64;
        let s_bar = chain.iter().map(|&(i, _)| energies[i]).sum::<f64>() / len;
        let h_bar = chain.iter().map(|&(_, h)| h).sum::<f64>() / len;
        (s_bar, h_bar)
    };
    let beta = fixed_beta.unwrap_or_else(|| {
        let (mut num, mut den) = (0.0, 0.0);
        for chain in &chains {
            let (s_bar, h_bar) = centered(chain);
            for &(i, h) in chain {
                num += (energies[i] - s_bar) * (h - h_bar);
                den += (h - h_bar) * (h - h_bar);
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    });
    let mut out = energies.to_vec();
    for chain in &chains {
        let (s_bar, h_bar) = centered(chain);
        for &(i, h) in chain {
            out[i] = s_bar + beta * (h - h_bar);
        }
    }
    (out, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_satisfies_constraints() {
        let n = 800;
        let energies: Vec<f64> = (0..n).map(|i| 5.0 + (i as f64 * 0.37).sin()).collect();
        let d_prev: Vec<f64> = (0..n).map(|i| 4.0 + (i as f64 * 0.11).cos()).collect();
        let constrained: Vec<usize> = (0..n - YEAR_LAG).filter(|i| i % 17 != 3).collect();
        let (s, beta) = project_energies(&energies, &d_prev, &constrained, None);
        for &i in &constrained {
            assert!((s[i + YEAR_LAG] - s[i] - beta * d_prev[i]).abs() < 1e-12);
        }
        let (s, beta) = project_energies(&energies, &d_prev, &constrained, Some(-0.01));
        assert_eq!(beta, -0.01);
        for &i in &constrained {
            assert!((s[i + YEAR_LAG] - s[i] + 0.01 * d_prev[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_identity_on_feasible_input() {
        let n = 740;
        let d_prev = vec![2.0; n];
        let energies: Vec<f64> = (0..n)
            .map(|i| 3.0 + (i % YEAR_LAG) as f64 * 0.001 - 0.04 * (i / YEAR_LAG) as f64)
            .collect();
        let constrained: Vec<usize> = (0..n - YEAR_LAG).collect();
        let (s, beta) = project_energies(&energies, &d_prev, &constrained, None);
        assert!((beta + 0.02).abs() < 1e-12);
        for i in 0..n {
            assert!((s[i] - energies[i]).abs() < 1e-12);
        }
    }
}

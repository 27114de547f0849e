//! The clear-sky matrix model.
//!
//! Power data `P` (m samples/day × n days) is approximated by a rank-k
//! product `L·R`. `L`'s columns are daily shape profiles; `R`'s columns are
//! the per-day mixing weights. The fitting objective, with per-day weights
//! `wᵢ` and `γ = 1 + β` from the previous sweep, is
//!
//! ```text
//!   Σ_{(t,i) observed, daytime} wᵢ ρ_τ(P[t,i] − (LR)[t,i])
//! + μ_L Σ_columns ‖D₂ L‖²                      intra-day smoothness
//! + μ_R Σ_rows    ‖R D₂ᵀ‖²                     day-to-day smoothness
//! + μ_year Σᵢ ‖Π_c (R[:, i+365] − γ R[:, i])‖²  yearly shape persistence
//! ```
//!
//! `c = Δt · Σ_daytime L[t, :]` maps a column of `R` to its daily energy and
//! `Π_c = I − ccᵀ/‖c‖²` removes that direction, so the yearly term shapes
//! the mixing weights without pulling on energies.
//!
//! subject to the linearized degradation constraint
//! `(dᵢ₊₃₆₅ − dᵢ) / d_prevᵢ = β` on the daily energies `d`, which the solver
//! enforces exactly rather than as a penalty. This is a reconstruction of the
//! clear-sky fitting problem with the degradation extension; the precise
//! weights and term placement of the original formulation are not public in
//! full and are fixed here by choice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ingest::{daytime_rows, PowerMatrix};
use crate::stats;

/// Days between the paired samples of the year-over-year constraint.
pub const YEAR_LAG: usize = 365;

/// Constraint rows with `d_prevᵢ < DENOMINATOR_FLOOR · median(d_prev)` are
/// dropped for that iteration.
pub const DENOMINATOR_FLOOR: f64 = 0.05;

/// Rows whose observed 98th percentile stays below this fraction of the
/// signal scale are night rows and carry no loss.
pub const NIGHT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("tau = {0} must lie strictly between 0 and 1")]
    TauOutOfRange(f64),
    #[error("axis of length {0} is too short for second differences (need 3)")]
    AxisTooShort(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("nonpositive energy denominator on constrained day {0}")]
    NonpositiveDenominator(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidParameter(String),
    #[error("matrix has no usable positive signal")]
    NoSignal,
}

/// Pinball (quantile) loss without the range check.
#[inline]
pub fn pinball(residual: f64, tau: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

/// `τ·max(r, 0) + (1 − τ)·max(−r, 0)`.
pub fn pinball_loss(residual: f64, tau: f64) -> Result<f64, ModelError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ModelError::TauOutOfRange(tau));
    }
    Ok(pinball(residual, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row is a sequence (differences run across columns).
    Rows,
    /// Each column is a sequence (differences run down rows).
    Columns,
}

/// Sum of squared second differences along `axis`.
pub fn second_diff_penalty(mat: &DMatrix<f64>, axis: Axis) -> Result<f64, ModelError> {
    let (len, count) = match axis {
        Axis::Columns => (mat.nrows(), mat.ncols()),
        Axis::Rows => (mat.ncols(), mat.nrows()),
    };
    if len < 3 {
        return Err(ModelError::AxisTooShort(len));
    }
    let at = |s: usize, j: usize| match axis {
        Axis::Columns => mat[(j, s)],
        Axis::Rows => mat[(s, j)],
    };
    let mut total = 0.0;
    for s in 0..count {
        for j in 1..len - 1 {
            let d = at(s, j - 1) - 2.0 * at(s, j) + at(s, j + 1);
            total += d * d;
        }
    }
    Ok(total)
}

/// Left and right factors of the rank-k model.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// m × k daily shape basis.
    pub left: DMatrix<f64>,
    /// k × n per-day weights.
    pub right: DMatrix<f64>,
}

impl Factorization {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self, ModelError> {
        if left.ncols() != right.nrows() || left.ncols() == 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "left {:?} · right {:?}",
                left.shape(),
                right.shape()
            )));
        }
        Ok(Self { left, right })
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    /// Unclamped `L·R`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.left * &self.right
    }
}

/// Clear-sky matrix `max(L·R, 0)`.
pub fn reconstruct(f: &Factorization) -> Result<DMatrix<f64>, ModelError> {
    if f.left.ncols() != f.right.nrows() {
        return Err(ModelError::DimensionMismatch(format!(
            "left {:?} · right {:?}",
            f.left.shape(),
            f.right.shape()
        )));
    }
    Ok(f.product().map(|v| v.max(0.0)))
}

/// Per-day energy in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyEnergy {
    pub d: Vec<f64>,
}

/// `dᵢ = Δt · Σ_t clear_sky[t, i]`.
pub fn daily_energy(clear_sky: &DMatrix<f64>, delta_t: f64) -> DailyEnergy {
    DailyEnergy {
        d: clear_sky.column_iter().map(|c| delta_t * c.sum()).collect(),
    }
}

/// Tuning parameters of the fit. Defaults: k = 6, τ = 0.85, μ_L = 500,
/// μ_R = 1000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub k: usize,
    pub tau: f64,
    pub mu_left: f64,
    pub mu_right: f64,
    pub mu_year: f64,
    /// Sweep budget of the alternating minimization.
    pub max_iters: usize,
    /// Convergence threshold on |Δβ| between sweeps (fraction per year).
    pub beta_tol: f64,
    /// Relative tolerance of each convex subproblem.
    pub subproblem_tol: f64,
    /// When set, β is held at this value instead of estimated.
    pub fixed_beta: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k: 6,
            tau: 0.85,
            mu_left: 500.0,
            mu_right: 1000.0,
            mu_year: 100.0,
            max_iters: 100,
            beta_tol: 1e-5,
            subproblem_tol: 1e-6,
            fixed_beta: None,
        }
    }
}

/// Range of τ over which the estimates stay reasonable.
pub const RECOMMENDED_TAU: (f64, f64) = (0.8, 0.9);

impl HyperParams {
    /// Checks hard constraints; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>, ModelError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ModelError::TauOutOfRange(self.tau));
        }
        if self.k == 0 {
            return Err(ModelError::InvalidParameter("k must be at least 1".into()));
        }
        for (name, v) in [
            ("mu_left", self.mu_left),
            ("mu_right", self.mu_right),
            ("mu_year", self.mu_year),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidParameter(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        if self.max_iters == 0 {
            return Err(ModelError::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.beta_tol > 0.0 && self.subproblem_tol > 0.0) {
            return Err(ModelError::InvalidParameter("tolerances must be positive".into()));
        }
        if let Some(b) = self.fixed_beta {
            if !b.is_finite() || b <= -1.0 {
                return Err(ModelError::InvalidParameter(format!("fixed_beta = {b}")));
            }
        }
        let mut warnings = Vec::new();
        if self.tau < RECOMMENDED_TAU.0 || self.tau > RECOMMENDED_TAU.1 {
            warnings.push(format!(
                "tau = {} is outside the recommended range [{}, {}]",
                self.tau, RECOMMENDED_TAU.0, RECOMMENDED_TAU.1
            ));
        }
        Ok(warnings)
    }
}

/// β and the previous iterate's daily energies (the bootstrap denominator).
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationState {
    pub beta: f64,
    pub d_prev: Vec<f64>,
}

impl DegradationState {
    /// Scale applied to last year's weights in the yearly persistence term.
    pub fn gamma(&self) -> f64 {
        1.0 + self.beta
    }

    /// Days `i` (0-based) whose pair `(i, i + 365)` enters the constraint.
    pub fn constrained_indices(&self) -> Result<Vec<usize>, ModelError> {
        let n = self.d_prev.len();
        if n <= YEAR_LAG {
            return Ok(Vec::new());
        }
        let head = &self.d_prev[..n - YEAR_LAG];
        let med = stats::median(head).unwrap_or(0.0);
        if !(med > 0.0) {
            return Err(ModelError::NonpositiveDenominator(0));
        }
        let floor = DENOMINATOR_FLOOR * med;
        Ok((0..n - YEAR_LAG).filter(|&i| self.d_prev[i] >= floor).collect())
    }
}

/// The loss-side view of a power matrix: normalized values, which entries
/// carry loss, per-day weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    /// Normalized power (masked entries are 0).
    pub values: DMatrix<f64>,
    /// Observed and in a daytime row.
    pub in_loss: DMatrix<bool>,
    pub daytime: Vec<bool>,
    pub weights: Vec<f64>,
    pub delta_t: f64,
    /// Divisor applied to the raw kW values.
    pub scale: f64,
}

impl ModelData {
    /// Normalizes by the 95th percentile of daily maxima and marks night rows.
    pub fn new(p: &PowerMatrix, weights: &[f64]) -> Result<Self, ModelError> {
        let scale = p.robust_scale().ok_or(ModelError::NoSignal)?;
        Self::with_scale(p, weights, scale)
    }

    pub fn with_scale(p: &PowerMatrix, weights: &[f64], scale: f64) -> Result<Self, ModelError> {
        if weights.len() != p.n() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} weights for {} days",
                weights.len(),
                p.n()
            )));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(ModelError::InvalidParameter("weights must lie in [0, 1]".into()));
        }
        let daytime = daytime_rows(p, NIGHT_FRACTION);
        let in_loss = DMatrix::from_fn(p.m(), p.n(), |t, i| daytime[t] && p.is_observed(t, i));
        Ok(Self {
            values: p.data() / scale,
            in_loss,
            daytime,
            weights: weights.to_vec(),
            delta_t: p.delta_t(),
            scale,
        })
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn daytime_rows(&self) -> usize {
        self.daytime.iter().filter(|d| **d).count()
    }

    /// Fraction of daytime entries that are observed.
    pub fn daytime_coverage(&self) -> f64 {
        let cells = self.daytime_rows() * self.n();
        if cells == 0 {
            return 0.0;
        }
        self.in_loss.iter().filter(|b| **b).count() as f64 / cells as f64
    }

    /// `c = Δt · Σ_{daytime t} L[t, :]`, so that the linear energy of day i
    /// is `c · R[:, i]`.
    pub fn energy_weights(&self, left: &DMatrix<f64>) -> Vec<f64> {
        (0..left.ncols())
            .map(|j| {
                self.delta_t
                    * (0..left.nrows())
                        .filter(|&t| self.daytime[t])
                        .map(|t| left[(t, j)])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Unclamped daytime energy of each day, linear in either factor.
    pub fn linear_energy(&self, f: &Factorization) -> Vec<f64> {
        let c = self.energy_weights(&f.left);
        f.right
            .column_iter()
            .map(|col| col.iter().zip(&c).map(|(r, cj)| r * cj).sum())
            .collect()
    }
}

/// Objective value split by term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub loss: f64,
    pub left_smoothness: f64,
    pub right_smoothness: f64,
    pub yearly: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.loss + self.left_smoothness + self.right_smoothness + self.yearly
    }
}

/// `I − ccᵀ/‖c‖²`, or the identity when `c` vanishes.
pub fn energy_projector(c: &[f64]) -> DMatrix<f64> {
    let k = c.len();
    let cc: f64 = c.iter().map(|v| v * v).sum();
    DMatrix::from_fn(k, k, |a, b| {
        let id = if a == b { 1.0 } else { 0.0 };
        if cc > 0.0 {
            id - c[a] * c[b] / cc
        } else {
            id
        }
    })
}

/// Evaluates the fitting objective at `f` for the bootstrap state `state`.
pub fn objective(
    data: &ModelData,
    f: &Factorization,
    hp: &HyperParams,
    state: &DegradationState,
) -> Result<ObjectiveTerms, ModelError> {
    let (m, n) = (data.m(), data.n());
    if f.left.nrows() != m || f.right.ncols() != n || f.left.ncols() != f.right.nrows() {
        return Err(ModelError::DimensionMismatch(format!(
            "data {m}×{n}, left {:?}, right {:?}",
            f.left.shape(),
            f.right.shape()
        )));
    }
    if state.d_prev.len() != n {
        return Err(ModelError::DimensionMismatch("d_prev length".into()));
    }
    for i in state.constrained_indices()? {
        if state.d_prev[i] <= 0.0 {
            return Err(ModelError::NonpositiveDenominator(i));
        }
    }
    if !(hp.tau > 0.0 && hp.tau < 1.0) {
        return Err(ModelError::TauOutOfRange(hp.tau));
    }

    let fitted = f.product();
    let mut loss = 0.0;
    for i in 0..n {
        let w = data.weights[i];
        let mut day = 0.0;
        for t in 0..m {
            if data.in_loss[(t, i)] {
                day += pinball(data.values[(t, i)] - fitted[(t, i)], hp.tau);
            }
        }
        loss += w * day;
    }

    let left_smoothness = if m >= 3 {
        hp.mu_left * second_diff_penalty(&f.left, Axis::Columns)?
    } else {
        0.0
    };
    let right_smoothness = if n >= 3 {
        hp.mu_right * second_diff_penalty(&f.right, Axis::Rows)?
    } else {
        0.0
    };
    let gamma = state.gamma();
    let mut yearly = 0.0;
    if n > YEAR_LAG {
        let proj = energy_projector(&data.energy_weights(&f.left));
        for i in 0..n - YEAR_LAG {
            let d = f.right.column(i + YEAR_LAG) - gamma * f.right.column(i);
            yearly += (&proj * d).norm_squared();
        }
    }
    Ok(ObjectiveTerms {
        loss,
        left_smoothness,
        right_smoothness,
        yearly: hp.mu_year * yearly,
    })
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pinball_examples() {
        assert!((pinball_loss(2.0, 0.85).unwrap() - 1.7).abs() < 1e-15);
        assert!((pinball_loss(-2.0, 0.85).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(pinball_loss(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(pinball_loss(1.0, 1.0), Err(ModelError::TauOutOfRange(1.0)));
        assert_eq!(pinball_loss(1.0, 0.0), Err(ModelError::TauOutOfRange(0.0)));
    }

    #[test]
    fn second_differences() {
        let ramp = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(second_diff_penalty(&ramp, Axis::Columns).unwrap(), 0.0);
        let tent = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert_eq!(second_diff_penalty(&tent, Axis::Columns).unwrap(), 4.0);
        assert_eq!(
            second_diff_penalty(&ramp, Axis::Rows),
            Err(ModelError::AxisTooShort(1))
        );
    }

    /// Banded second-difference operator D₂ of shape (len − 2) × len.
    fn d2(len: usize) -> DMatrix<f64> {
        DMatrix::from_fn(len - 2, len, |r, c| match c as isize - r as isize {
            0 | 2 => 1.0,
            1 => -2.0,
            _ => 0.0,
        })
    }

    #[test]
    fn second_diff_matches_operator_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let cols = (d2(5) * &a).norm_squared();
        let rows = (&a * d2(5).transpose()).norm_squared();
        assert!((second_diff_penalty(&a, Axis::Columns).unwrap() - cols).abs() < 1e-12);
        assert!((second_diff_penalty(&a, Axis::Rows).unwrap() - rows).abs() < 1e-12);
    }

    #[test]
    fn rank_one_reconstruction() {
        let u = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 3.0, 1.0]);
        let f = Factorization::new(u.clone(), DMatrix::from_element(1, 5, 1.0)).unwrap();
        let cs = reconstruct(&f).unwrap();
        for col in cs.column_iter() {
            assert_eq!(col, u.column(0));
        }
    }

    #[test]
    fn reconstruction_clamps_and_matches_naive_product() {
        let f = Factorization::new(
            DMatrix::from_column_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 2, &[-0.03, 0.5]),
        )
        .unwrap();
        let cs = reconstruct(&f).unwrap();
        assert_eq!(cs[(0, 0)], 0.0);
        assert_eq!(cs[(0, 1)], 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (7, 3, 11);
        let l = DMatrix::from_fn(m, k, |_, _| rng.random::<f64>() - 0.3);
        let r = DMatrix::from_fn(k, n, |_, _| rng.random::<f64>() - 0.3);
        let cs = reconstruct(&Factorization::new(l.clone(), r.clone()).unwrap()).unwrap();
        for t in 0..m {
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..k {
                    s += l[(t, j)] * r[(j, i)];
                }
                assert!((cs[(t, i)] - s.max(0.0)).abs() < 1e-14);
            }
        }
        assert!(matches!(
            reconstruct(&Factorization { left: l, right: DMatrix::zeros(2, n) }),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn daily_energy_examples() {
        let ones = DMatrix::from_element(24, 2, 1.0);
        assert_eq!(daily_energy(&ones, 1.0).d, vec![24.0, 24.0]);
        assert_eq!(daily_energy(&DMatrix::zeros(24, 1), 1.0).d, vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col: Vec<f64> = (0..96).map(|_| rng.random::<f64>()).collect();
        let mut expect = 0.0;
        for v in &col {
            expect += v;
        }
        let got = daily_energy(&DMatrix::from_column_slice(96, 1, &col), 0.25).d[0];
        assert!((got - 0.25 * expect).abs() < 1e-12);
    }

    #[test]
    fn hyperparam_defaults_and_validation() {
        let hp = HyperParams::default();
        assert_eq!((hp.k, hp.tau, hp.mu_left, hp.mu_right), (6, 0.85, 500.0, 1000.0));
        assert!(hp.validate().unwrap().is_empty());
        let wide = HyperParams { tau: 0.7, ..hp.clone() };
        assert_eq!(wide.validate().unwrap().len(), 1);
        assert!(HyperParams { tau: 1.5, ..hp.clone() }.validate().is_err());
        assert!(HyperParams { k: 0, ..hp.clone() }.validate().is_err());
        assert!(HyperParams { mu_left: -1.0, ..hp }.validate().is_err());
    }

    fn data_from(values: DMatrix<f64>, weights: Vec<f64>) -> ModelData {
        let p = PowerMatrix::observed(values, 1.0, NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()).unwrap();
        let mut d = ModelData::with_scale(&p, &weights, 1.0).unwrap();
        d.daytime = vec![true; p.m()];
        d.in_loss = DMatrix::from_element(p.m(), p.n(), true);
        d
    }

    #[test]
    fn perfect_fit_has_zero_objective() {
        // affine profile, affine day weights, n < 365 so no yearly term
        let l = DMatrix::from_fn(6, 1, |t, _| 1.0 + t as f64);
        let r = DMatrix::from_fn(1, 8, |_, i| 2.0 + 0.5 * i as f64);
        let f = Factorization::new(l, r).unwrap();
        let data = data_from(f.product(), vec![1.0; 8]);
        let state = DegradationState { beta: 0.0, d_prev: vec![1.0; 8] };
        let terms = objective(&data, &f, &HyperParams { k: 1, ..Default::default() }, &state).unwrap();
        assert!(terms.total().abs() < 1e-12, "{terms:?}");
    }

    #[test]
    fn weights_scale_their_terms_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Factorization::new(
            DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(2, 9, |_, _| rng.random::<f64>()),
        )
        .unwrap();
        let data = data_from(DMatrix::from_fn(6, 9, |_, _| rng.random::<f64>()), vec![1.0; 9]);
        let state = DegradationState { beta: 0.0, d_prev: vec![1.0; 9] };
        let hp = HyperParams { k: 2, ..Default::default() };
        let a = objective(&data, &f, &hp, &state).unwrap();
        let b = objective(&data, &f, &HyperParams { mu_left: 2.0 * hp.mu_left, ..hp.clone() }, &state).unwrap();
        assert!((b.left_smoothness - 2.0 * a.left_smoothness).abs() < 1e-9);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.right_smoothness, b.right_smoothness);
    }

    /// Scalar-loop oracle for every term, including the yearly one.
    #[test]
    fn objective_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n, k) = (5, 372, 2);
        let l = DMatrix::from_fn(m, k, |_, _| rng.random::<f64>());
        let r = DMatrix::from_fn(k, n, |_, _| rng.random::<f64>());
        let vals = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 2.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut data = data_from(vals.clone(), w.clone());
        data.in_loss[(2, 7)] = false;
        let state = DegradationState { beta: -0.02, d_prev: vec![1.0; n] };
        let hp = HyperParams { k, mu_year: 3.0, ..Default::default() };
        let f = Factorization::new(l.clone(), r.clone()).unwrap();
        let got = objective(&data, &f, &hp, &state).unwrap();

        let mut loss = 0.0;
        for t in 0..m {
            for i in 0..n {
                if (t, i) == (2, 7) {
                    continue;
                }
                let mut fit = 0.0;
                for j in 0..k {
                    fit += l[(t, j)] * r[(j, i)];
                }
                let res = vals[(t, i)] - fit;
                loss += w[i] * if res > 0.0 { 0.85 * res } else { -0.15 * res };
            }
        }
        let mut ls = 0.0;
        for j in 0..k {
            for t in 1..m - 1 {
                ls += (l[(t - 1, j)] - 2.0 * l[(t, j)] + l[(t + 1, j)]).powi(2);
            }
        }
        let mut rs = 0.0;
        for j in 0..k {
            for i in 1..n - 1 {
                rs += (r[(j, i - 1)] - 2.0 * r[(j, i)] + r[(j, i + 1)]).powi(2);
            }
        }
        // yearly: subtract the component along c by explicit Gram-Schmidt
        let c: Vec<f64> = (0..k)
            .map(|j| (0..m).filter(|&t| data.daytime[t]).map(|t| l[(t, j)]).sum::<f64>() * data.delta_t)
            .collect();
        let cc: f64 = c.iter().map(|v| v * v).sum();
        let mut yr = 0.0;
        for i in 0..n - 365 {
            let d: Vec<f64> = (0..k).map(|j| r[(j, i + 365)] - 0.98 * r[(j, i)]).collect();
            let along: f64 = d.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / cc;
            yr += d.iter().zip(&c).map(|(a, b)| (a - along * b).powi(2)).sum::<f64>();
        }
        assert!((got.loss - loss).abs() < 1e-9 * loss);
        assert!((got.left_smoothness - 500.0 * ls).abs() < 1e-9 * (1.0 + ls));
        assert!((got.right_smoothness - 1000.0 * rs).abs() < 1e-9 * (1.0 + rs));
        assert!((got.yearly - 3.0 * yr).abs() < 1e-9 * (1.0 + yr));
    }

    #[test]
    fn nonpositive_denominator_is_an_error() {
        let state = DegradationState { beta: 0.0, d_prev: vec![0.0; 400] };
        assert_eq!(state.constrained_indices(), Err(ModelError::NonpositiveDenominator(0)));
        let mut d = vec![1.0; 400];
        d[3] = 0.01;
        let s = DegradationState { beta: 0.0, d_prev: d };
        let idx = s.constrained_indices().unwrap();
        assert_eq!(idx.len(), 34);
        assert!(!idx.contains(&3));
    }

    proptest! {
        #[test]
        fn pinball_is_positively_homogeneous(r in -1e3f64..1e3, c in 1e-3f64..1e3, tau in 0.01f64..0.99) {
            let lhs = pinball(c * r, tau);
            let rhs = c * pinball(r, tau);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn pinball_is_convex(a in -10f64..10.0, b in -10f64..10.0, lam in 0f64..1.0, tau in 0.01f64..0.99) {
            let mid = pinball(lam * a + (1.0 - lam) * b, tau);
            prop_assert!(mid <= lam * pinball(a, tau) + (1.0 - lam) * pinball(b, tau) + 1e-12);
        }

        #[test]
        fn second_diff_vanishes_on_affine(a in -5f64..5.0, b in -5f64..5.0, len in 3usize..20) {
            let m = DMatrix::from_fn(len, 1, |t, _| a + b * t as f64);
            prop_assert!(second_diff_penalty(&m, Axis::Columns).unwrap() < 1e-18 * (1.0 + (a.abs() + b.abs() * len as f64).powi(2)) + 1e-20);
        }

        #[test]
        fn reconstruction_is_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Factorization::new(
                DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() - 0.5),
                DMatrix::from_fn(2, 6, |_, _| rng.random::<f64>() - 0.5),
            ).unwrap();
            prop_assert!(reconstruct(&f).unwrap().iter().all(|v| *v >= 0.0));
        }
    }
}

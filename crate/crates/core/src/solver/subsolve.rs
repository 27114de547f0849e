//! Solvers for convex programs of the form
//!
//! ```text
//! minimize   ½ xᵀQx + qᵀx + Σⱼ wⱼ ρ_τ(bⱼ − aⱼᵀx)
//! subject to C x = e
//! ```
//!
//! where ρ_τ is the pinball loss. The default method is a primal-dual
//! interior-point iteration that stops on a certified relative duality gap.
//! The alternative splits the pinball rows off (`z = A x`), handles them by
//! their closed-form proximal map, and solves each x-update against a
//! quasi-definite KKT matrix factored once per penalty value. Small problems
//! are finished with an active-set polish that recovers the exact vertex of
//! the piecewise linear part.

use nalgebra::{DMatrix, DVector};

use super::sparse::{CsrMatrix, EnvelopeLdl, EnvelopeSymbolic};
use crate::model::pinball;

#[derive(Debug, Clone)]
pub struct PinballTerms {
    /// One row `aⱼ` per term.
    pub rows: CsrMatrix,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct EqualityConstraints {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
}

/// A convex piecewise-linear-plus-quadratic program with linear equalities.
#[derive(Debug, Clone)]
pub struct ConvexSubproblem {
    pub n_vars: usize,
    /// Positive semidefinite, stored with both triangles.
    pub quadratic: CsrMatrix,
    pub linear: Vec<f64>,
    pub pinball: Option<PinballTerms>,
    pub equality: Option<EqualityConstraints>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SubsolveError {
    #[error("equality constraints are inconsistent (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("iteration budget exhausted after {} iterations", .0.iterations)]
    MaxIterations(Box<Solution>),
    #[error("invalid subproblem: {0}")]
    InvalidProblem(String),
    #[error("KKT factorization failed: {0}")]
    Factorization(#[from] super::sparse::FactorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Method {
    #[default]
    InteriorPoint,
    /// Alternating direction method of multipliers.
    Splitting,
}

#[derive(Debug, Clone, Copy)]
pub struct SubsolveSettings {
    pub method: Method,
    /// Relative tolerance: duality gap for the interior-point method, primal
    /// and dual residuals for splitting.
    pub tol: f64,
    pub max_iters: usize,
    pub rho: f64,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Proximal weight on ‖x − xₖ‖², relative to the KKT diagonal scale.
    pub proximal: f64,
    pub check_every: usize,
    /// Problems with at most this many variables plus active rows are polished.
    pub polish_limit: usize,
}

impl Default for SubsolveSettings {
    fn default() -> Self {
        Self {
            method: Method::InteriorPoint,
            tol: 1e-6,
            max_iters: 20_000,
            rho: 1.0,
            relaxation: 1.6,
            proximal: 1e-9,
            check_every: 5,
            polish_limit: 400,
        }
    }
}

impl SubsolveSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Iterate state that can seed a later solve of a structurally identical
/// problem.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub fitted: Vec<f64>,
    pub dual: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub constraint_residual: f64,
    pub polished: bool,
    pub warm: WarmStart,
}

impl ConvexSubproblem {
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            quadratic: CsrMatrix::zeros(n_vars, n_vars),
            linear: vec![0.0; n_vars],
            pinball: None,
            equality: None,
        }
    }

    pub fn n_pinball(&self) -> usize {
        self.pinball.as_ref().map_or(0, |p| p.rows.nrows())
    }

    pub fn n_constraints(&self) -> usize {
        self.equality.as_ref().map_or(0, |e| e.matrix.nrows())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut qx = vec![0.0; self.n_vars];
        self.quadratic.mul_vec(x, &mut qx);
        let mut f: f64 = x
            .iter()
            .zip(&qx)
            .zip(&self.linear)
            .map(|((xi, qi), li)| 0.5 * xi * qi + li * xi)
            .sum();
        if let Some(p) = &self.pinball {
            for j in 0..p.rows.nrows() {
                let r = p.offsets[j] - p.rows.row_dot(j, x);
                f += p.weights[j] * pinball(r, p.tau);
            }
        }
        f
    }

    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        match &self.equality {
            None => 0.0,
            Some(eq) => (0..eq.matrix.nrows())
                .map(|i| (eq.matrix.row_dot(i, x) - eq.rhs[i]).abs())
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<(), SubsolveError> {
        let bad = |msg: &str| Err(SubsolveError::InvalidProblem(msg.to_string()));
        let n = self.n_vars;
        if self.quadratic.nrows() != n || self.quadratic.ncols() != n {
            return bad("quadratic term has wrong shape");
        }
        if self.linear.len() != n {
            return bad("linear term has wrong length");
        }
        if self.quadratic.values().iter().chain(&self.linear).any(|v| !v.is_finite()) {
            return bad("non-finite quadratic or linear data");
        }
        if let Some(p) = &self.pinball {
            let m = p.rows.nrows();
            if p.rows.ncols() != n || p.offsets.len() != m || p.weights.len() != m {
                return bad("pinball terms have inconsistent shapes");
            }
            if !(p.tau > 0.0 && p.tau < 1.0) {
                return bad("pinball tau outside (0, 1)");
            }
            if p.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                || p.offsets.iter().chain(p.rows.values()).any(|v| !v.is_finite())
            {
                return bad("pinball data must be finite with nonnegative weights");
            }
        }
        if let Some(eq) = &self.equality {
            if eq.matrix.ncols() != n || eq.rhs.len() != eq.matrix.nrows() {
                return bad("equality constraints have inconsistent shapes");
            }
            if eq.rhs.iter().chain(eq.matrix.values()).any(|v| !v.is_finite()) {
                return bad("non-finite equality data");
            }
        }
        Ok(())
    }
}

/// Solves `p` to relative tolerance `tol` from a cold start.
pub fn convex_subsolve(p: &ConvexSubproblem, tol: f64) -> Result<Solution, SubsolveError> {
    solve(p, &SubsolveSettings::with_tol(tol), None)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// The quasi-definite KKT operator `[Q + ρG + δI, Cᵀ; C, −εI]`.
struct Kkt<'a> {
    p: &'a ConvexSubproblem,
    symbolic: EnvelopeSymbolic,
    /// Values aligned with the symbolic pattern, split by role.
    base: Vec<f64>,
    gram_mask: Vec<f64>,
    diag_mask: Vec<f64>,
    reg_mask: Vec<f64>,
    delta: f64,
    eps: f64,
    rho: f64,
    factor: Option<EnvelopeLdl>,
}

impl<'a> Kkt<'a> {
    fn new(p: &'a ConvexSubproblem, proximal: f64) -> Self {
        let n = p.n_vars;
        let nc = p.n_constraints();
        let total = n + nc;
        let mut pattern = Vec::new();
        let mut base = Vec::new();
        let mut gram_mask = Vec::new();
        let mut diag_mask = Vec::new();
        let mut reg_mask = Vec::new();
        let mut push = |pat: &mut Vec<(usize, usize)>, r, c, b, g, d, e| {
            pat.push((r, c));
            base.push(b);
            gram_mask.push(g);
            diag_mask.push(d);
            reg_mask.push(e);
        };
        for i in 0..n {
            let (cols, vals) = p.quadratic.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                push(&mut pattern, i, c, v, 0.0, 0.0, 0.0);
            }
        }
        let mut diag_scale: f64 = 1.0;
        if let Some(pb) = &p.pinball {
            let g = pb.rows.gram();
            for i in 0..n {
                let (cols, vals) = g.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    push(&mut pattern, i, c, 0.0, v, 0.0, 0.0);
                    if c == i {
                        diag_scale = diag_scale.max(v);
                    }
                }
            }
        }
        for i in 0..n {
            let (cols, vals) = p.quadratic.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c == i {
                    diag_scale = diag_scale.max(v);
                }
            }
            push(&mut pattern, i, i, 0.0, 0.0, 1.0, 0.0);
        }
        if let Some(eq) = &p.equality {
            for r in 0..nc {
                let (cols, vals) = eq.matrix.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    push(&mut pattern, n + r, c, v, 0.0, 0.0, 0.0);
                    push(&mut pattern, c, n + r, v, 0.0, 0.0, 0.0);
                }
                push(&mut pattern, n + r, n + r, 0.0, 0.0, 0.0, -1.0);
            }
        }

        let mut degree = vec![0usize; total];
        for &(r, c) in &pattern {
            if r < c {
                degree[r] += 1;
                degree[c] += 1;
            }
        }
        let mut sorted = degree.clone();
        sorted.sort_unstable();
        let median = sorted.get(total / 2).copied().unwrap_or(0);
        let dense_threshold = (4 * median).max(32);

        let symbolic = EnvelopeSymbolic::new(total, &pattern, dense_threshold);
        Self {
            p,
            symbolic,
            base,
            gram_mask,
            diag_mask,
            reg_mask,
            delta: proximal * diag_scale,
            eps: 1e-10 * diag_scale,
            rho: f64::NAN,
            factor: None,
        }
    }

    fn refactor(&mut self, rho: f64) -> Result<(), SubsolveError> {
        let vals: Vec<f64> = (0..self.base.len())
            .map(|i| {
                self.base[i]
                    + rho * self.gram_mask[i]
                    + self.delta * self.diag_mask[i]
                    + self.eps * self.reg_mask[i]
            })
            .collect();
        self.factor = Some(self.symbolic.factor(&vals)?);
        self.rho = rho;
        Ok(())
    }

    /// Unregularized KKT product used by iterative refinement.
    fn apply(&self, sol: &[f64], out: &mut [f64]) {
        let n = self.p.n_vars;
        let (x, lam) = sol.split_at(n);
        let (top, bottom) = out.split_at_mut(n);
        self.p.quadratic.mul_vec(x, top);
        for (t, xi) in top.iter_mut().zip(x) {
            *t += self.delta * xi;
        }
        if let Some(pb) = &self.p.pinball {
            let mut ax = vec![0.0; pb.rows.nrows()];
            pb.rows.mul_vec(x, &mut ax);
            let mut atax = vec![0.0; n];
            pb.rows.tr_mul_vec(&ax, &mut atax);
            for (t, v) in top.iter_mut().zip(&atax) {
                *t += self.rho * v;
            }
        }
        if let Some(eq) = &self.p.equality {
            let mut ctl = vec![0.0; n];
            eq.matrix.tr_mul_vec(lam, &mut ctl);
            for (t, v) in top.iter_mut().zip(&ctl) {
                *t += v;
            }
            eq.matrix.mul_vec(x, bottom);
        }
    }

    fn solve(&self, rhs: &[f64], refine: usize) -> Vec<f64> {
        let f = self.factor.as_ref().expect("factor before solve");
        let mut sol = f.solve(rhs);
        if self.p.n_constraints() == 0 && refine < 2 {
            return sol;
        }
        let mut work = vec![0.0; rhs.len()];
        let mut corr = vec![0.0; rhs.len()];
        for _ in 0..refine {
            self.apply(&sol, &mut work);
            for (w, r) in work.iter_mut().zip(rhs) {
                *w = r - *w;
            }
            f.solve_into(&work, &mut corr);
            for (s, c) in sol.iter_mut().zip(&corr) {
                *s += c;
            }
        }
        sol
    }
}

fn prox_pinball(v: f64, offset: f64, weight: f64, tau: f64, rho: f64) -> f64 {
    // argmin_z w·ρ_τ(b − z) + (ρ/2)(z − v)²
    let r = offset - v;
    let t = weight / rho;
    let r_new = if r > t * tau {
        r - t * tau
    } else if r < -t * (1.0 - tau) {
        r + t * (1.0 - tau)
    } else {
        0.0
    };
    offset - r_new
}

struct RawSolution {
    x: Vec<f64>,
    fitted: Vec<f64>,
    dual: Vec<f64>,
    rho: f64,
    iterations: usize,
    converged: bool,
}

/// Solves `p` with explicit settings. `warm` seeds the splitting method and
/// is ignored by the interior-point method.
pub fn solve(
    p: &ConvexSubproblem,
    settings: &SubsolveSettings,
    warm: Option<&WarmStart>,
) -> Result<Solution, SubsolveError> {
    p.validate()?;
    let raw = match settings.method {
        Method::InteriorPoint => {
            let out = super::ipm::solve(p, settings)?;
            RawSolution {
                x: out.x,
                fitted: out.fitted,
                dual: out.dual,
                rho: 1.0,
                iterations: out.iterations,
                converged: out.converged,
            }
        }
        Method::Splitting => admm(p, settings, warm)?,
    };
    finish(p, settings, raw)
}

fn admm(
    p: &ConvexSubproblem,
    settings: &SubsolveSettings,
    warm: Option<&WarmStart>,
) -> Result<RawSolution, SubsolveError> {
    let n = p.n_vars;
    let nc = p.n_constraints();
    let np = p.n_pinball();
    let e_rhs: Vec<f64> = p.equality.as_ref().map_or(Vec::new(), |e| e.rhs.clone());

    let compatible = |w: &&WarmStart| w.x.len() == n && w.fitted.len() == np && w.dual.len() == np;
    let warm = warm.filter(compatible);
    let mut x = warm.map_or_else(|| vec![0.0; n], |w| w.x.clone());
    let mut z = match (warm, &p.pinball) {
        (Some(w), _) => w.fitted.clone(),
        (None, Some(pb)) => {
            let mut ax = vec![0.0; np];
            pb.rows.mul_vec(&x, &mut ax);
            ax
        }
        (None, None) => Vec::new(),
    };
    let mut u = warm.map_or_else(|| vec![0.0; np], |w| w.dual.clone());
    let mut rho = warm.map_or(settings.rho, |w| w.rho).clamp(1e-6, 1e6);

    let mut kkt = Kkt::new(p, settings.proximal);
    kkt.refactor(rho)?;

    let mut rhs = vec![0.0; n + nc];
    let mut ax = vec![0.0; np];
    let mut atv = vec![0.0; n];
    let mut z_prev = vec![0.0; np];
    let mut qx = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let alpha = settings.relaxation;

    while iterations < settings.max_iters {
        iterations += 1;
        // x-update
        if let Some(pb) = &p.pinball {
            let diff: Vec<f64> = z.iter().zip(&u).map(|(zi, ui)| zi - ui).collect();
            pb.rows.tr_mul_vec(&diff, &mut atv);
        }
        for i in 0..n {
            rhs[i] = -p.linear[i] + kkt.delta * x[i] + rho * atv[i];
        }
        rhs[n..].copy_from_slice(&e_rhs);
        let refine = if iterations == 1 { 3 } else { 1 };
        let sol = kkt.solve(&rhs, refine);
        let x_prev = std::mem::replace(&mut x, sol[..n].to_vec());

        if iterations == 1 && nc > 0 {
            let resid = p.constraint_residual(&x);
            if resid > 1e-6 * (1.0 + inf_norm(&e_rhs)) {
                return Err(SubsolveError::Infeasible { residual: resid });
            }
        }

        let Some(pb) = &p.pinball else {
            // pure QP: the proximal step only perturbs by δ‖Δx‖
            let dx = x.iter().zip(&x_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if dx <= settings.tol * (1.0 + inf_norm(&x)) {
                converged = true;
                break;
            }
            continue;
        };

        // z- and dual updates with over-relaxation
        pb.rows.mul_vec(&x, &mut ax);
        z_prev.copy_from_slice(&z);
        for j in 0..np {
            let ax_hat = alpha * ax[j] + (1.0 - alpha) * z_prev[j];
            let v = ax_hat + u[j];
            z[j] = prox_pinball(v, pb.offsets[j], pb.weights[j], pb.tau, rho);
            u[j] += ax_hat - z[j];
        }

        if iterations % settings.check_every != 0 && iterations < settings.max_iters {
            continue;
        }

        let prim = ax.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dz: Vec<f64> = z.iter().zip(&z_prev).map(|(a, b)| a - b).collect();
        pb.rows.tr_mul_vec(&dz, &mut atv);
        let dual = rho * inf_norm(&atv);
        p.quadratic.mul_vec(&x, &mut qx);
        pb.rows.tr_mul_vec(&u, &mut atv);
        let prim_scale = inf_norm(&ax).max(inf_norm(&z));
        let dual_scale = inf_norm(&qx).max(rho * inf_norm(&atv)).max(inf_norm(&p.linear));
        let eps_prim = settings.tol * (1.0 + prim_scale);
        let eps_dual = settings.tol * (1.0 + dual_scale);
        if prim <= eps_prim && dual <= eps_dual {
            converged = true;
            break;
        }

        if iterations % (settings.check_every * 5) == 0 {
            let rel_prim = prim / prim_scale.max(1e-12);
            let rel_dual = dual / dual_scale.max(1e-12);
            let ratio = (rel_prim / rel_dual.max(1e-300)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho != rho {
                    let s = rho / new_rho;
                    u.iter_mut().for_each(|ui| *ui *= s);
                    rho = new_rho;
                    kkt.refactor(rho)?;
                }
            }
        }
    }

    // the x-iterate is exactly feasible for C x = e; if the pinball split has
    // not fully closed, z carries the residual and x is what is reported
    Ok(RawSolution {
        x,
        fitted: z,
        dual: u,
        rho,
        iterations,
        converged,
    })
}

fn finish(p: &ConvexSubproblem, settings: &SubsolveSettings, raw: RawSolution) -> Result<Solution, SubsolveError> {
    let (n, nc) = (p.n_vars, p.n_constraints());
    let e_rhs: Vec<f64> = p.equality.as_ref().map_or(Vec::new(), |e| e.rhs.clone());
    let converged = raw.converged;
    let mut solution = Solution {
        objective: p.objective(&raw.x),
        constraint_residual: p.constraint_residual(&raw.x),
        x: raw.x,
        iterations: raw.iterations,
        polished: false,
        warm: WarmStart {
            x: Vec::new(),
            fitted: raw.fitted,
            dual: raw.dual,
            rho: raw.rho,
        },
    };
    solution.warm.x = solution.x.clone();

    if let Some(pb) = &p.pinball {
        let active = solution
            .warm
            .fitted
            .iter()
            .zip(&pb.offsets)
            .filter(|(z, b)| z == b)
            .count();
        if n + nc + active <= settings.polish_limit {
            if let Some(xp) = polish(p, &solution.x, &solution.warm.fitted) {
                let fp = p.objective(&xp);
                let feasible = p.constraint_residual(&xp) <= 1e-9 * (1.0 + inf_norm(&e_rhs));
                if feasible && fp <= solution.objective {
                    solution.objective = fp;
                    solution.constraint_residual = p.constraint_residual(&xp);
                    solution.x = xp;
                    solution.polished = true;
                }
            }
        }
    } else if n + nc <= settings.polish_limit {
        if let Some(xp) = polish(p, &solution.x, &[]) {
            let fp = p.objective(&xp);
            if fp <= solution.objective + 1e-12 * (1.0 + fp.abs()) {
                solution.objective = fp;
                solution.constraint_residual = p.constraint_residual(&xp);
                solution.x = xp;
                solution.polished = true;
            }
        }
    }

    if converged || solution.polished {
        Ok(solution)
    } else {
        Err(SubsolveError::MaxIterations(Box::new(solution)))
    }
}

/// Active-set refinement: rows whose fitted value sits on the kink become
/// equalities, the rest contribute their one-sided slope. Solved densely
/// through a least-squares KKT system.
fn polish(p: &ConvexSubproblem, x: &[f64], fitted: &[f64]) -> Option<Vec<f64>> {
    let n = p.n_vars;
    let mut grad = DVector::from_column_slice(&p.linear);
    let mut eq_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    if let Some(eq) = &p.equality {
        for r in 0..eq.matrix.nrows() {
            let (c, v) = eq.matrix.row(r);
            eq_rows.push((c.iter().copied().zip(v.iter().copied()).collect(), eq.rhs[r]));
        }
    }
    if let Some(pb) = &p.pinball {
        for j in 0..pb.rows.nrows() {
            let (cols, vals) = pb.rows.row(j);
            let b = pb.offsets[j];
            if fitted[j] == b {
                eq_rows.push((cols.iter().copied().zip(vals.iter().copied()).collect(), b));
                continue;
            }
            let r = b - pb.rows.row_dot(j, x);
            // d/dx of w ρ_τ(b − aᵀx) on the side given by the current residual
            let slope = if r > 0.0 {
                -pb.weights[j] * pb.tau
            } else {
                pb.weights[j] * (1.0 - pb.tau)
            };
            for (&c, &v) in cols.iter().zip(vals) {
                grad[c] += slope * v;
            }
        }
    }
    let ne = eq_rows.len();
    let dim = n + ne;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    let q = p.quadratic.to_dense();
    k.view_mut((0, 0), (n, n)).copy_from(&q);
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs[i] = -grad[i];
    }
    for (r, (row, b)) in eq_rows.iter().enumerate() {
        for &(c, v) in row {
            k[(n + r, c)] += v;
            k[(c, n + r)] += v;
        }
        rhs[n + r] = *b;
    }
    let svd = k.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let sol = svd.solve(&rhs, tol).ok()?;
    let xp: Vec<f64> = sol.rows(0, n).iter().copied().collect();
    if xp.iter().all(|v| v.is_finite()) {
        Some(xp)
    } else {
        None
    }
}

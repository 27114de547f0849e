//! Primal-dual interior-point method (Mehrotra predictor-corrector) for the
//! pinball-plus-quadratic program. Each pinball residual is split as
//! `b − Ax = u − v` with `u, v ≥ 0`; the multiplier `y` of that equality
//! lives in the box `[−w(1 − τ), wτ]`, so the dual slacks are implied by `y`.
//! Every Newton step reduces to one quasi-definite system
//! `[Q + AᵀD⁻¹A, Cᵀ; C, 0]` with the same sparsity as `Q + AᵀA`.

use super::sparse::{CsrMatrix, EnvelopeLdl, EnvelopeSymbolic};
use super::subsolve::{ConvexSubproblem, SubsolveError, SubsolveSettings};

const MAX_ITERS: usize = 200;
const STEP_FRACTION: f64 = 0.99;

pub(crate) struct IpmOutcome {
    pub x: Vec<f64>,
    /// `Ax` with rows judged to sit on their kink snapped to `b`.
    pub fitted: Vec<f64>,
    pub dual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The reduced Newton system, refactored each iteration with new `D⁻¹`.
struct Reduced<'a> {
    p: &'a ConvexSubproblem,
    a: Option<&'a CsrMatrix>,
    at: Option<CsrMatrix>,
    symbolic: EnvelopeSymbolic,
    q_vals: Vec<f64>,
    c_vals: Vec<f64>,
    gram_len: usize,
    delta: f64,
    eps: f64,
    dinv: Vec<f64>,
    factor: Option<EnvelopeLdl>,
}

impl<'a> Reduced<'a> {
    fn new(p: &'a ConvexSubproblem, a: Option<&'a CsrMatrix>) -> Self {
        let n = p.n_vars;
        let nc = p.n_constraints();
        let mut pattern = Vec::new();
        let mut q_vals = Vec::new();
        let mut diag_scale: f64 = 1.0;
        for i in 0..n {
            let (cols, vals) = p.quadratic.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                pattern.push((i, c));
                q_vals.push(v);
                if c == i {
                    diag_scale = diag_scale.max(v.abs());
                }
            }
        }
        let mut gram_len = 0;
        if let Some(a) = a {
            let g = a.gram();
            for i in 0..n {
                let (cols, vals) = g.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    pattern.push((i, c));
                    if c == i {
                        diag_scale = diag_scale.max(v);
                    }
                }
            }
            gram_len = g.nnz();
        }
        for i in 0..n {
            pattern.push((i, i));
        }
        let mut c_vals = Vec::new();
        if let Some(eq) = &p.equality {
            for r in 0..nc {
                let (cols, vals) = eq.matrix.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    pattern.push((n + r, c));
                    pattern.push((c, n + r));
                    c_vals.extend([v, v]);
                }
                pattern.push((n + r, n + r));
            }
        }

        let total = n + nc;
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
        let symbolic = EnvelopeSymbolic::new(total, &pattern, (4 * median).max(32));
        Self {
            p,
            a,
            at: a.map(CsrMatrix::transpose),
            symbolic,
            q_vals,
            c_vals,
            gram_len,
            delta: 1e-11 * diag_scale,
            eps: 1e-11 * diag_scale,
            dinv: Vec::new(),
            factor: None,
        }
    }

    fn refactor(&mut self, dinv: &[f64]) -> Result<(), SubsolveError> {
        let n = self.p.n_vars;
        let nc = self.p.n_constraints();
        let mut vals = Vec::with_capacity(self.q_vals.len() + self.gram_len + n + self.c_vals.len() + nc);
        vals.extend_from_slice(&self.q_vals);
        if let (Some(a), Some(at)) = (self.a, &self.at) {
            let mut g = Vec::with_capacity(self.gram_len);
            a.weighted_gram_values(at, dinv, &mut g);
            vals.extend_from_slice(&g);
        }
        vals.extend(std::iter::repeat_n(self.delta, n));
        let mut ci = 0;
        if let Some(eq) = &self.p.equality {
            for r in 0..nc {
                let len = eq.matrix.row(r).0.len();
                vals.extend_from_slice(&self.c_vals[ci..ci + 2 * len]);
                ci += 2 * len;
                vals.push(-self.eps);
            }
        }
        self.factor = Some(self.symbolic.factor(&vals)?);
        self.dinv = dinv.to_vec();
        Ok(())
    }

    /// Unregularized operator `[Q + AᵀD⁻¹A, Cᵀ; C, 0]`.
    fn apply(&self, sol: &[f64], out: &mut [f64]) {
        let n = self.p.n_vars;
        let (x, z) = sol.split_at(n);
        let (top, bottom) = out.split_at_mut(n);
        self.p.quadratic.mul_vec(x, top);
        if let Some(a) = self.a {
            let mut ax = vec![0.0; a.nrows()];
            a.mul_vec(x, &mut ax);
            for (v, d) in ax.iter_mut().zip(&self.dinv) {
                *v *= d;
            }
            let mut back = vec![0.0; n];
            a.tr_mul_vec(&ax, &mut back);
            for (t, b) in top.iter_mut().zip(&back) {
                *t += b;
            }
        }
        if let Some(eq) = &self.p.equality {
            let mut ct = vec![0.0; n];
            eq.matrix.tr_mul_vec(z, &mut ct);
            for (t, v) in top.iter_mut().zip(&ct) {
                *t += v;
            }
            eq.matrix.mul_vec(x, bottom);
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let f = self.factor.as_ref().expect("factored");
        let mut sol = f.solve(rhs);
        let mut work = vec![0.0; rhs.len()];
        let mut corr = vec![0.0; rhs.len()];
        let mut last = f64::INFINITY;
        let floor = 1e-14 * (1.0 + inf_norm(rhs));
        for _ in 0..3 {
            self.apply(&sol, &mut work);
            for (w, r) in work.iter_mut().zip(rhs) {
                *w = r - *w;
            }
            let norm = inf_norm(&work);
            if !(norm < last) || norm <= floor {
                break;
            }
            last = norm;
            f.solve_into(&work, &mut corr);
            for (s, c) in sol.iter_mut().zip(&corr) {
                *s += c;
            }
        }
        sol
    }
}

/// Largest `α ≤ 1` keeping `v + α·dv > 0` for all entries.
fn max_step(v: &[f64], dv: &[f64], mut alpha: f64) -> f64 {
    for (a, d) in v.iter().zip(dv) {
        if *d < 0.0 {
            alpha = alpha.min(-a / d);
        }
    }
    alpha
}

pub(crate) fn solve(p: &ConvexSubproblem, settings: &SubsolveSettings) -> Result<IpmOutcome, SubsolveError> {
    let n = p.n_vars;
    let nc = p.n_constraints();
    let e: Vec<f64> = p.equality.as_ref().map_or(Vec::new(), |eq| eq.rhs.clone());
    let pb = p.pinball.as_ref();
    let np = pb.map_or(0, |pb| pb.rows.nrows());
    let a = pb.map(|pb| &pb.rows);
    let mut sys = Reduced::new(p, a);

    // least-squares start: min ½xᵀQx + qᵀx + ½‖Ax − b‖² s.t. Cx = e
    sys.refactor(&vec![1.0; np])?;
    let mut rhs = vec![0.0; n + nc];
    for (r, q) in rhs.iter_mut().zip(&p.linear) {
        *r = -q;
    }
    if let Some(pb) = pb {
        let mut atb = vec![0.0; n];
        pb.rows.tr_mul_vec(&pb.offsets, &mut atb);
        for (r, v) in rhs.iter_mut().zip(&atb) {
            *r += v;
        }
    }
    rhs[n..].copy_from_slice(&e);
    let sol = sys.solve(&rhs);
    let mut x = sol[..n].to_vec();
    if nc > 0 {
        let resid = p.constraint_residual(&x);
        if resid > 1e-6 * (1.0 + inf_norm(&e)) {
            return Err(SubsolveError::Infeasible { residual: resid });
        }
    }
    let mut lambda: Vec<f64> = sol[n..].iter().map(|z| -z).collect();

    let Some(pb) = pb else {
        return Ok(IpmOutcome {
            x,
            fitted: Vec::new(),
            dual: Vec::new(),
            iterations: 1,
            converged: true,
        });
    };
    let a = &pb.rows;
    let (b, w, tau) = (&pb.offsets, &pb.weights, pb.tau);
    // the split variables need strictly positive box widths
    let w: Vec<f64> = w.iter().map(|v| v.max(1e-12)).collect();

    let mut ax = vec![0.0; np];
    a.mul_vec(&x, &mut ax);
    let resid: Vec<f64> = b.iter().zip(&ax).map(|(bj, aj)| bj - aj).collect();
    let xi = (0.1 * resid.iter().map(|r| r.abs()).sum::<f64>() / np.max(1) as f64).max(1e-3 * (1.0 + inf_norm(b)));
    let mut u: Vec<f64> = resid.iter().map(|r| r.max(0.0) + xi).collect();
    let mut v: Vec<f64> = resid.iter().map(|r| (-r).max(0.0) + xi).collect();
    let mut y: Vec<f64> = w.iter().map(|wj| wj * (tau - 0.5)).collect();
    lambda.iter_mut().for_each(|l| *l = 0.0);

    let feas_tol = (1e-2 * settings.tol).max(1e-12);
    let mut qx = vec![0.0; n];
    let mut aty = vec![0.0; n];
    let mut ctl = vec![0.0; n];
    let mut cx = vec![0.0; nc];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITERS {
        iterations += 1;
        a.mul_vec(&x, &mut ax);
        a.tr_mul_vec(&y, &mut aty);
        p.quadratic.mul_vec(&x, &mut qx);
        if let Some(eq) = &p.equality {
            eq.matrix.tr_mul_vec(&lambda, &mut ctl);
            eq.matrix.mul_vec(&x, &mut cx);
        }
        let r_d: Vec<f64> = (0..n).map(|i| qx[i] + p.linear[i] - aty[i] - ctl[i]).collect();
        let r_p: Vec<f64> = (0..np).map(|j| ax[j] + u[j] - v[j] - b[j]).collect();
        let r_c: Vec<f64> = (0..nc).map(|r| cx[r] - e[r]).collect();
        let s_u: Vec<f64> = (0..np).map(|j| w[j] * tau - y[j]).collect();
        let s_v: Vec<f64> = (0..np).map(|j| w[j] * (1.0 - tau) + y[j]).collect();
        let comp = dot(&u, &s_u) + dot(&v, &s_v);
        let mu = comp / (2 * np) as f64;

        let xqx = dot(&x, &qx);
        let primal = 0.5 * xqx
            + dot(&p.linear, &x)
            + (0..np).map(|j| w[j] * (tau * u[j] + (1.0 - tau) * v[j])).sum::<f64>();
        let dual = -0.5 * xqx + dot(b, &y) + dot(&e, &lambda);
        let gap = (primal - dual).abs() / (1.0 + primal.abs());
        let p_res = inf_norm(&r_p) / (1.0 + inf_norm(b));
        let d_res = inf_norm(&r_d) / (1.0 + inf_norm(&p.linear).max(inf_norm(&aty)).max(inf_norm(&qx)));
        let c_res = inf_norm(&r_c) / (1.0 + inf_norm(&e));
        if gap <= settings.tol && p_res <= feas_tol && d_res <= feas_tol && c_res <= feas_tol {
            converged = true;
            break;
        }

        let dinv: Vec<f64> = (0..np).map(|j| 1.0 / (u[j] / s_u[j] + v[j] / s_v[j])).collect();
        sys.refactor(&dinv)?;

        let direction = |r1: &[f64], r2: &[f64]| {
            let h: Vec<f64> = (0..np).map(|j| -r_p[j] - r1[j] / s_u[j] + r2[j] / s_v[j]).collect();
            let scaled: Vec<f64> = h.iter().zip(&dinv).map(|(a, b)| a * b).collect();
            let mut top = vec![0.0; n];
            a.tr_mul_vec(&scaled, &mut top);
            let mut rhs = vec![0.0; n + nc];
            for i in 0..n {
                rhs[i] = top[i] - r_d[i];
            }
            for r in 0..nc {
                rhs[n + r] = -r_c[r];
            }
            let sol = sys.solve(&rhs);
            let dx = sol[..n].to_vec();
            let dl: Vec<f64> = sol[n..].iter().map(|z| -z).collect();
            let mut adx = vec![0.0; np];
            a.mul_vec(&dx, &mut adx);
            let dy: Vec<f64> = (0..np).map(|j| dinv[j] * (h[j] - adx[j])).collect();
            let du: Vec<f64> = (0..np).map(|j| (r1[j] + u[j] * dy[j]) / s_u[j]).collect();
            let dv: Vec<f64> = (0..np).map(|j| (r2[j] - v[j] * dy[j]) / s_v[j]).collect();
            (dx, dl, dy, du, dv)
        };
        let step_len = |dy: &[f64], du: &[f64], dv: &[f64]| {
            let neg: Vec<f64> = dy.iter().map(|d| -d).collect();
            let mut alpha = max_step(&u, du, 1.0);
            alpha = max_step(&v, dv, alpha);
            alpha = max_step(&s_u, &neg, alpha);
            max_step(&s_v, dy, alpha)
        };

        let r1: Vec<f64> = (0..np).map(|j| -u[j] * s_u[j]).collect();
        let r2: Vec<f64> = (0..np).map(|j| -v[j] * s_v[j]).collect();
        let (_, _, dy_a, du_a, dv_a) = direction(&r1, &r2);
        let alpha_a = step_len(&dy_a, &du_a, &dv_a);
        let comp_a: f64 = (0..np)
            .map(|j| {
                (u[j] + alpha_a * du_a[j]) * (s_u[j] - alpha_a * dy_a[j])
                    + (v[j] + alpha_a * dv_a[j]) * (s_v[j] + alpha_a * dy_a[j])
            })
            .sum();
        let sigma = (comp_a / comp).clamp(0.0, 1.0).powi(3);

        let r1: Vec<f64> = (0..np)
            .map(|j| sigma * mu - u[j] * s_u[j] + du_a[j] * dy_a[j])
            .collect();
        let r2: Vec<f64> = (0..np)
            .map(|j| sigma * mu - v[j] * s_v[j] - dv_a[j] * dy_a[j])
            .collect();
        let (dx, dl, dy, du, dv) = direction(&r1, &r2);
        let alpha = (STEP_FRACTION * step_len(&dy, &du, &dv)).min(1.0);

        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for r in 0..nc {
            lambda[r] += alpha * dl[r];
        }
        for j in 0..np {
            u[j] += alpha * du[j];
            v[j] += alpha * dv[j];
            y[j] += alpha * dy[j];
        }
        if x.iter().chain(&y).any(|t| !t.is_finite()) {
            return Err(SubsolveError::InvalidProblem("interior-point iterate diverged".into()));
        }
    }

    a.mul_vec(&x, &mut ax);
    let fitted = (0..np)
        .map(|j| {
            let s_u = w[j] * tau - y[j];
            let s_v = w[j] * (1.0 - tau) + y[j];
            // interior dual on both sides marks a row held at its kink
            if s_u > 1e-3 * w[j] && s_v > 1e-3 * w[j] && (b[j] - ax[j]).abs() <= 1e-6 * (1.0 + b[j].abs()) {
                b[j]
            } else {
                ax[j]
            }
        })
        .collect();
    Ok(IpmOutcome {
        x,
        fitted,
        dual: y,
        iterations,
        converged,
    })
}

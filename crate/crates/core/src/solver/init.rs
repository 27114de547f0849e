use nalgebra::DMatrix;

use super::SolverError;
use crate::ingest::PowerMatrix;
use crate::model::Factorization;
use crate::stats;

/// Starting point: masked entries are filled with their row's τ-quantile,
/// then the best rank-k factorization of the filled matrix is split so that
/// the dominant right row averages 1.
pub fn initialize(p: &PowerMatrix, k: usize, tau: f64) -> Result<Factorization, SolverError> {
    initialize_values(p.data(), p.mask(), k, tau)
}

pub(crate) fn initialize_values(
    data: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    k: usize,
    tau: f64,
) -> Result<Factorization, SolverError> {
    let (m, n) = data.shape();
    if k == 0 || k > m.min(n) {
        return Err(SolverError::RankTooLarge { k, max: m.min(n) });
    }
    let filled = fill_masked(data, mask, tau);
    let svd = filled.svd(true, true);
    let u = svd.u.as_ref().expect("left vectors requested");
    let vt = svd.v_t.as_ref().expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut left = DMatrix::zeros(m, k);
    let mut right = DMatrix::zeros(k, n);
    for (j, &src) in order.iter().take(k).enumerate() {
        let sigma = svd.singular_values[src];
        let sign = if u.column(src).sum() < 0.0 { -1.0 } else { 1.0 };
        left.set_column(j, &(u.column(src) * (sign * sigma)));
        right.set_row(j, &(vt.row(src) * sign));
    }
    let alpha = right.row(0).mean();
    if alpha.abs() > 1e-12 {
        left *= alpha;
        right /= alpha;
    }
    Ok(Factorization { left, right })
}

fn fill_masked(data: &DMatrix<f64>, mask: &DMatrix<bool>, tau: f64) -> DMatrix<f64> {
    let mut out = data.clone();
    for t in 0..data.nrows() {
        let row: Vec<f64> = (0..data.ncols())
            .filter(|&i| mask[(t, i)])
            .map(|i| data[(t, i)])
            .collect();
        let fill = stats::quantile(&row, tau).unwrap_or(0.0);
        for i in 0..data.ncols() {
            if !mask[(t, i)] {
                out[(t, i)] = fill;
            }
        }
    }
    out
}

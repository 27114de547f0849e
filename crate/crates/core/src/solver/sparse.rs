//! Compressed sparse rows, a bandwidth-reducing ordering, and an envelope
//! (skyline) LDLᵀ factorization for quasi-definite systems.
//!
//! The subproblems produced by the fitter have a banded structure in time
//! plus a handful of long-range couplings (the one-year lag) and at most a
//! few dense rows (the degradation rate). Reverse Cuthill-McKee keeps the
//! envelope narrow; dense nodes are moved to the end where their full rows
//! cost O(n·bandwidth).

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols[slot] = c;
            vals[slot] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..nrows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_by_key(|&s| cols[s]);
            for &s in &order {
                if let Some(&last) = indices.last() {
                    if indices.len() > indptr[r] && last == cols[s] {
                        *values.last_mut().unwrap() += vals[s];
                        continue;
                    }
                }
                indices.push(cols[s]);
                values.push(vals[s]);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds a matrix row by row from already-sorted, duplicate-free rows.
    pub fn from_rows<I>(ncols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (c, v) in row {
                debug_assert!(c < ncols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: indptr.len() - 1,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    /// `out = A x`
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        for (i, o) in out.iter_mut().enumerate().take(self.nrows) {
            *o = self.row_dot(i, x);
        }
    }

    /// `out = Aᵀ y`
    pub fn tr_mul_vec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.nrows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += v * yi;
            }
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, i, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// The Gram matrix `AᵀA`, computed column-pair by column-pair with a
    /// dense accumulator.
    pub fn gram(&self) -> CsrMatrix {
        let at = self.transpose();
        let n = self.ncols;
        let mut acc = vec![0.0; n];
        let mut marker = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for p in 0..n {
            touched.clear();
            let (rows, pvals) = at.row(p);
            for (&j, &ajp) in rows.iter().zip(pvals) {
                let (cols, vals) = self.row(j);
                for (&q, &ajq) in cols.iter().zip(vals) {
                    if marker[q] != p {
                        marker[q] = p;
                        acc[q] = 0.0;
                        touched.push(q);
                    }
                    acc[q] += ajp * ajq;
                }
            }
            touched.sort_unstable();
            for &q in &touched {
                indices.push(q);
                values.push(acc[q]);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr,
            indices,
            values,
        }
    }

    /// Values of `Aᵀ diag(d) A` in the exact entry order of [`Self::gram`].
    /// `at` must be `self.transpose()`.
    pub fn weighted_gram_values(&self, at: &CsrMatrix, d: &[f64], out: &mut Vec<f64>) {
        let n = self.ncols;
        let mut acc = vec![0.0; n];
        let mut marker = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();
        out.clear();
        for p in 0..n {
            touched.clear();
            let (rows, pvals) = at.row(p);
            for (&j, &ajp) in rows.iter().zip(pvals) {
                let s = ajp * d[j];
                let (cols, vals) = self.row(j);
                for (&q, &ajq) in cols.iter().zip(vals) {
                    if marker[q] != p {
                        marker[q] = p;
                        acc[q] = 0.0;
                        touched.push(q);
                    }
                    acc[q] += s * ajq;
                }
            }
            touched.sort_unstable();
            out.extend(touched.iter().map(|&q| acc[q]));
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                d[(i, c)] += v;
            }
        }
        d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Symmetric adjacency lists (no self loops) of a square pattern.
fn adjacency(n: usize, pattern: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(r, c) in pattern {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Reverse Cuthill-McKee ordering. Nodes whose degree exceeds
/// `dense_threshold` are excluded from the sweep and appended last.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(n: usize, pattern: &[(usize, usize)], dense_threshold: usize) -> Vec<usize> {
    let adj = adjacency(n, pattern);
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > dense_threshold).collect();
    let degree: Vec<usize> = adj
        .iter()
        .map(|a| a.iter().filter(|&&v| !dense[v]).count())
        .collect();

    let mut visited = dense.clone();
    let mut order = Vec::with_capacity(n);
    let mut level = vec![0usize; n];

    let bfs_last_level = |start: usize, visited: &[bool], level: &mut [usize]| -> (usize, usize) {
        // returns (eccentricity, node of minimum degree in the last level)
        let mut seen = visited.to_vec();
        let mut queue = VecDeque::new();
        queue.push_back(start);
        seen[start] = true;
        level[start] = 0;
        let mut last = start;
        let mut ecc = 0;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    level[w] = level[v] + 1;
                    if level[w] > ecc || (level[w] == ecc && degree[w] < degree[last]) {
                        ecc = level[w];
                        last = w;
                    }
                    queue.push_back(w);
                }
            }
        }
        (ecc, last)
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut ecc, mut far) = bfs_last_level(start, &visited, &mut level);
        for _ in 0..8 {
            let (e2, f2) = bfs_last_level(far, &visited, &mut level);
            if e2 <= ecc {
                break;
            }
            start = far;
            ecc = e2;
            far = f2;
        }
        if ecc == 0 {
            start = seed;
        }

        let mut queue = VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        let mut nbrs: Vec<usize> = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(adj[v].iter().copied().filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (degree[w], w));
            for &w in &nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order.extend((0..n).filter(|&v| dense[v]));
    order
}

/// LDLᵀ factor stored by rows over the lower envelope of a permuted matrix.
#[derive(Debug, Clone)]
pub struct EnvelopeLdl {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    first: Vec<usize>,
    rowptr: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum FactorError {
    #[error("zero or non-finite pivot at row {0}")]
    BadPivot(usize),
}

/// Precomputed mapping from a symmetric pattern to envelope slots, so that
/// refactoring with new values skips all symbolic work.
#[derive(Debug, Clone)]
pub struct EnvelopeSymbolic {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    rowptr: Vec<usize>,
    /// For each input entry: `Some(slot)` in `lower`, or `None` for diagonal
    /// (then `diag_of[entry]` holds the row).
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Lower(usize),
    Diag(usize),
    Upper,
}

impl EnvelopeSymbolic {
    /// `pattern` lists the (row, col) positions of a symmetric matrix in the
    /// order values will later be supplied. Both triangles may be present;
    /// upper-triangle entries (after permutation) are ignored.
    pub fn new(n: usize, pattern: &[(usize, usize)], dense_threshold: usize) -> Self {
        let perm = reverse_cuthill_mckee(n, pattern, dense_threshold);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for &(r, c) in pattern {
            let (pr, pc) = (iperm[r], iperm[c]);
            let (hi, lo) = if pr >= pc { (pr, pc) } else { (pc, pr) };
            if lo < first[hi] {
                first[hi] = lo;
            }
        }
        let mut rowptr = vec![0; n + 1];
        for r in 0..n {
            rowptr[r + 1] = rowptr[r] + (r - first[r]);
        }
        let slots = pattern
            .iter()
            .map(|&(r, c)| {
                let (pr, pc) = (iperm[r], iperm[c]);
                if pr == pc {
                    Slot::Diag(pr)
                } else if pr > pc {
                    Slot::Lower(rowptr[pr] + (pc - first[pr]))
                } else {
                    Slot::Upper
                }
            })
            .collect();
        Self {
            n,
            perm,
            first,
            rowptr,
            slots,
        }
    }

    pub fn envelope_size(&self) -> usize {
        self.rowptr[self.n]
    }

    /// Numeric factorization with values aligned to the construction pattern.
    pub fn factor(&self, values: &[f64]) -> Result<EnvelopeLdl, FactorError> {
        assert_eq!(values.len(), self.slots.len());
        let mut lower = vec![0.0; self.envelope_size()];
        let mut diag = vec![0.0; self.n];
        for (slot, &v) in self.slots.iter().zip(values) {
            match *slot {
                Slot::Lower(s) => lower[s] += v,
                Slot::Diag(r) => diag[r] += v,
                Slot::Upper => {}
            }
        }
        let mut ldl = EnvelopeLdl {
            n: self.n,
            perm: self.perm.clone(),
            first: self.first.clone(),
            rowptr: self.rowptr.clone(),
            lower,
            diag,
        };
        ldl.factor_in_place()?;
        Ok(ldl)
    }
}

impl EnvelopeLdl {
    fn factor_in_place(&mut self) -> Result<(), FactorError> {
        let n = self.n;
        // u[c] = L[r,c]·D[c] during the processing of row r
        let mut u = vec![0.0; n];
        for r in 0..n {
            let fr = self.first[r];
            let base_r = self.rowptr[r];
            for c in fr..r {
                let fc = self.first[c];
                let lo = fr.max(fc);
                let base_c = self.rowptr[c];
                let mut s = self.lower[base_r + (c - fr)];
                if lo < c {
                    let ur = &u[lo..c];
                    let lc = &self.lower[base_c + (lo - fc)..base_c + (c - fc)];
                    s -= ur.iter().zip(lc).map(|(a, b)| a * b).sum::<f64>();
                }
                u[c] = s;
                self.lower[base_r + (c - fr)] = s / self.diag[c];
            }
            let mut d = self.diag[r];
            for c in fr..r {
                d -= u[c] * self.lower[base_r + (c - fr)];
            }
            if !d.is_finite() || d == 0.0 {
                return Err(FactorError::BadPivot(r));
            }
            self.diag[r] = d;
        }
        Ok(())
    }

    /// Solves `A x = b` in the original (unpermuted) ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        self.solve_into(b, &mut x);
        x
    }

    pub fn solve_into(&self, b: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for r in 0..n {
            let fr = self.first[r];
            let base = self.rowptr[r];
            let row = &self.lower[base..base + (r - fr)];
            let s: f64 = row.iter().zip(&y[fr..r]).map(|(a, b)| a * b).sum();
            y[r] -= s;
        }
        for r in 0..n {
            y[r] /= self.diag[r];
        }
        for r in (0..n).rev() {
            let fr = self.first[r];
            let base = self.rowptr[r];
            let yr = y[r];
            if yr != 0.0 {
                let row = &self.lower[base..base + (r - fr)];
                for (yc, l) in y[fr..r].iter_mut().zip(row) {
                    *yc -= l * yr;
                }
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = y[new];
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|&&d| d < 0.0).count()
    }
}

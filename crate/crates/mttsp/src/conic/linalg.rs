//! Minimal sparse linear algebra: CSC matrices and an LDL^T factorization
//! for the quasidefinite KKT systems assembled by the interior-point solver.

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from (row, col, value) triplets. Duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; ncols];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            count[c] += 1;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        for c in 0..ncols {
            col_ptr[c + 1] = col_ptr[c] + count[c];
        }
        let nnz = col_ptr[ncols];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = col_ptr.clone();
        for &(r, c, v) in triplets {
            let p = next[c];
            row_idx[p] = r;
            values[p] = v;
            next[c] += 1;
        }
        let mut m = CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        };
        m.sort_and_merge();
        m
    }

    /// Sort row indices within each column and merge duplicates by summing.
    fn sort_and_merge(&mut self) {
        let mut new_ptr = vec![0usize; self.ncols + 1];
        let mut new_rows = Vec::with_capacity(self.row_idx.len());
        let mut new_vals = Vec::with_capacity(self.values.len());
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for c in 0..self.ncols {
            buf.clear();
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                buf.push((self.row_idx[p], self.values[p]));
            }
            buf.sort_unstable_by_key(|&(r, _)| r);
            let mut i = 0;
            while i < buf.len() {
                let r = buf[i].0;
                let mut v = buf[i].1;
                let mut j = i + 1;
                while j < buf.len() && buf[j].0 == r {
                    v += buf[j].1;
                    j += 1;
                }
                new_rows.push(r);
                new_vals.push(v);
                i = j;
            }
            new_ptr[c + 1] = new_rows.len();
        }
        self.col_ptr = new_ptr;
        self.row_idx = new_rows;
        self.values = new_vals;
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// y += alpha * A * x
    pub fn mul_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * xc;
            }
        }
    }

    /// y += alpha * A^T * x
    pub fn mul_t_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_acc(1.0, x, &mut y);
        y
    }

    pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.mul_t_acc(1.0, x, &mut y);
        y
    }
}

/// LDL^T factorization of a sparse symmetric matrix given by its upper
/// triangle in CSC form, following the up-looking algorithm of Davis's LDL.
///
/// No pivoting is performed; the caller guarantees quasidefiniteness via
/// regularization and passes the expected sign of each pivot so that small
/// pivots can be pushed away from zero without flipping inertia.
pub struct LdlFactor {
    n: usize,
    // symbolic data, reusable across numeric refactorizations
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
    // numeric data
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    diag: Vec<f64>,
    // workspaces
    l_next: Vec<usize>,
    flag: Vec<usize>,
    pattern: Vec<usize>,
    y: Vec<f64>,
}

impl LdlFactor {
    /// Symbolic analysis of the upper-triangle pattern.
    pub fn analyze(upper: &CscMatrix) -> Self {
        assert_eq!(upper.nrows, upper.ncols);
        let n = upper.ncols;
        let mut parent = vec![-1isize; n];
        let mut l_nz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in upper.col_ptr[k]..upper.col_ptr[k + 1] {
                let mut i = upper.row_idx[p];
                debug_assert!(i <= k, "matrix must be upper triangular");
                while i < k && flag[i] != k {
                    if parent[i] == -1 {
                        parent[i] = k as isize;
                    }
                    l_nz[i] += 1;
                    flag[i] = k;
                    i = parent[i] as usize;
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + l_nz[k];
        }
        let nnz = l_col_ptr[n];
        LdlFactor {
            n,
            parent,
            l_col_ptr,
            l_row_idx: vec![0; nnz],
            l_values: vec![0.0; nnz],
            diag: vec![0.0; n],
            l_next: vec![0; n],
            flag: vec![usize::MAX; n],
            pattern: vec![0; n],
            y: vec![0.0; n],
        }
    }

    /// Numeric factorization. `signs[k]` is +1 or -1, the expected sign of
    /// pivot k; pivots with magnitude below `pivot_floor` are replaced by
    /// `±pivot_floor` with the expected sign.
    pub fn factor(&mut self, upper: &CscMatrix, signs: &[i8], pivot_floor: f64) {
        let n = self.n;
        assert_eq!(upper.ncols, n);
        assert_eq!(signs.len(), n);
        for k in 0..n {
            self.l_next[k] = self.l_col_ptr[k];
        }
        for k in 0..n {
            // pattern of row k of L via elimination-tree reach
            let mut top = n;
            self.flag[k] = k;
            self.y[k] = 0.0;
            for p in upper.col_ptr[k]..upper.col_ptr[k + 1] {
                let mut i = upper.row_idx[p];
                self.y[i] += upper.values[p];
                let mut len = 0;
                while i < k && self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i] as usize;
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    self.pattern[top] = self.pattern[len];
                }
            }
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            for t in top..n {
                let i = self.pattern[t];
                let yi = self.y[i];
                self.y[i] = 0.0;
                for p in self.l_col_ptr[i]..self.l_next[i] {
                    self.y[self.l_row_idx[p]] -= self.l_values[p] * yi;
                }
                let l_ki = yi / self.diag[i];
                dk -= l_ki * yi;
                self.l_row_idx[self.l_next[i]] = k;
                self.l_values[self.l_next[i]] = l_ki;
                self.l_next[i] += 1;
            }
            // keep the pivot away from zero with its expected sign
            if signs[k] >= 0 {
                self.diag[k] = dk.max(pivot_floor);
            } else {
                self.diag[k] = dk.min(-pivot_floor);
            }
        }
    }

    /// Solve L D L^T x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for j in 0..n {
            let xj = b[j];
            if xj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    b[self.l_row_idx[p]] -= self.l_values[p] * xj;
                }
            }
        }
        for j in 0..n {
            b[j] /= self.diag[j];
        }
        for j in (0..n).rev() {
            let mut acc = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * b[self.l_row_idx[p]];
            }
            b[j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csc_from_triplets_sums_duplicates() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.mul(&[1.0, 1.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn csc_matvec_transpose() {
        // [1 2; 0 3; 4 0]
        let m = CscMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (2, 0, 4.0), (0, 1, 2.0), (1, 1, 3.0)]);
        assert_eq!(m.mul(&[1.0, 1.0]), vec![3.0, 3.0, 4.0]);
        assert_eq!(m.mul_t(&[1.0, 1.0, 1.0]), vec![5.0, 5.0]);
    }

    #[test]
    fn ldl_factor_solves_quasidefinite_system() {
        // K = [2 1 0; 1 -3 1; 0 1 -2], quasidefinite-ish with signs (+,-,-)
        let upper = CscMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, -3.0), (1, 2, 1.0), (2, 2, -2.0)],
        );
        let mut f = LdlFactor::analyze(&upper);
        f.factor(&upper, &[1, -1, -1], 1e-13);
        let mut x = vec![1.0, 2.0, 3.0];
        f.solve(&mut x);
        // verify K x = b by dense multiply
        let k = [[2.0, 1.0, 0.0], [1.0, -3.0, 1.0], [0.0, 1.0, -2.0]];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| k[i][j] * x[j]).sum())
            .collect();
        for (bi, want) in b.iter().zip([1.0, 2.0, 3.0]) {
            assert!((bi - want).abs() < 1e-12, "residual too large: {b:?}");
        }
    }

    #[test]
    fn ldl_handles_sparse_arrow_pattern() {
        // arrow matrix: diagonal plus dense last row/col
        let n = 20;
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i, i, if i + 1 == n { -4.0 } else { 2.0 + i as f64 }));
        }
        for i in 0..n - 1 {
            trips.push((i, n - 1, 0.5));
        }
        let upper = CscMatrix::from_triplets(n, n, &trips);
        let mut f = LdlFactor::analyze(&upper);
        let mut signs = vec![1i8; n];
        signs[n - 1] = -1;
        f.factor(&upper, &signs, 1e-13);
        let b0: Vec<f64> = (0..n).map(|i| (i % 3) as f64 - 1.0).collect();
        let mut x = b0.clone();
        f.solve(&mut x);
        // residual check against full symmetric operator
        let mut r = b0.clone();
        for &(i, j, v) in &trips {
            r[i] -= v * x[j];
            if i != j {
                r[j] -= v * x[i];
            }
        }
        let rmax = r.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(rmax < 1e-10, "residual {rmax}");
    }
}

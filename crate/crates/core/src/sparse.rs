//! Minimal CSR matrix for compact-support kernel features of time-like
//! covariates. Only the operations the truncated-SVD path needs: matvec,
//! transpose-matvec and the squared Frobenius norm.

use ndarray::{Array1, Array2};

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(column, value)` entries. Entries within a row may
    /// be in any order; zero values may be included and are kept as given.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for (c, v) in row {
                debug_assert!(c < ncols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, values }
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

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// y = A·x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// y = Aᵀ·x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                y[self.indices[k]] += self.values[k] * xr;
            }
        }
        y
    }

    /// Column sums divided by the row count (used to freeze zero-mean columns).
    pub fn column_means(&self) -> Array1<f64> {
        let mut m = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[self.indices[k]] += self.values[k];
            }
        }
        Array1::from_vec(m) / self.nrows.max(1) as f64
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[(r, self.indices[k])] = self.values[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense() {
        let m = CsrMatrix::from_rows(
            3,
            vec![vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)], vec![], vec![(0, 0.5), (1, 0.5), (2, 0.5)]],
        );
        let d = m.to_dense();
        let x = [1.0, 2.0, 3.0];
        let y = m.matvec(&x);
        for r in 0..4 {
            let expect: f64 = (0..3).map(|c| d[(r, c)] * x[c]).sum();
            assert!((y[r] - expect).abs() < 1e-14);
        }
        let xt = [1.0, -1.0, 0.5, 2.0];
        let yt = m.matvec_t(&xt);
        for c in 0..3 {
            let expect: f64 = (0..4).map(|r| d[(r, c)] * xt[r]).sum();
            assert!((yt[c] - expect).abs() < 1e-14);
        }
    }
}

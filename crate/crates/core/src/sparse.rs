//! Compressed sparse row matrices and the dense products the model needs.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; each row is sorted by column.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        let n = rows.len();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            rows: n,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds from unordered triplets.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        Self::from_rows(cols, per_row)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut per_row = vec![Vec::new(); self.cols];
        for (r, c, v) in self.triplets() {
            per_row[c].push((r, v));
        }
        Self::from_rows(self.rows, per_row)
    }

    /// Scales each row so its values sum to one; empty rows stay empty.
    pub fn row_normalized(&self) -> CsrMatrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let sum: f64 = self.values[span.clone()].iter().sum();
            if sum != 0.0 {
                for v in &mut out.values[span] {
                    *v /= sum;
                }
            }
        }
        out
    }

    /// `self · x`
    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "sparse matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for (r, mut out_row) in out.rows_mut().into_iter().enumerate() {
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.triplets() {
            d[[r, c]] += v;
        }
        d
    }
}

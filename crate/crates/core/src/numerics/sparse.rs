use super::Matrix;

/// Compressed sparse row matrix with sorted, de-duplicated column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicate positions are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut entries in per_row {
            entries.sort_by_key(|&(c, _)| c);
            for (c, v) in entries {
                if indices.len() > *indptr.last().unwrap() && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Same sparsity pattern with every stored value replaced by `f(row, col, value)`.
    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] = f(r, self.indices[p], self.values[p]);
            }
        }
        out
    }

    /// Drops entries for which `keep(row, col)` is false.
    pub fn filter(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if keep(r, c) {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(self.rows, self.cols, &triplets)
    }

    /// The listed rows, in order, as a `rows.len() × cols` matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            indices.extend_from_slice(&self.indices[span.clone()]);
            values.extend_from_slice(&self.values[span]);
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse-dense product `self · dense`.
    pub fn matmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.rows(), "sparse matmul shape mismatch");
        let m = dense.cols();
        let mut out = Matrix::zeros(self.rows, m);
        for r in 0..self.rows {
            let out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                for (o, d) in out_row.iter_mut().zip(dense.row(c)) {
                    *o += v * d;
                }
            }
        }
        out
    }

    /// `selfᵀ · dense`.
    pub fn tmatmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.rows(), "sparse tmatmul shape mismatch");
        let m = dense.cols();
        let mut out = Matrix::zeros(self.cols, m);
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row(r) {
                for (o, d) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * d;
                }
            }
        }
        out
    }

    /// Sparse-sparse product `self · rhs`.
    pub fn matmul(&self, rhs: &Csr) -> Csr {
        assert_eq!(self.cols, rhs.rows, "sparse product shape mismatch");
        let mut acc = vec![0.0; rhs.cols];
        let mut touched = vec![false; rhs.cols];
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..self.rows {
            let mut cols_in_row = Vec::new();
            for (k, a) in self.row(r) {
                for (c, b) in rhs.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_in_row.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols_in_row.sort_unstable();
            for c in cols_in_row {
                indices.push(c);
                values.push(acc[c]);
                acc[c] = 0.0;
                touched[c] = false;
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: self.rows,
            cols: rhs.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Block-diagonal concatenation.
    pub fn block_diag(blocks: &[&Csr]) -> Csr {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut col_offset = 0;
        for b in blocks {
            for r in 0..b.rows {
                for (c, v) in b.row(r) {
                    indices.push(c + col_offset);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
            col_offset += b.cols;
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.row_mut(r)[c] = v;
            }
        }
        out
    }
}

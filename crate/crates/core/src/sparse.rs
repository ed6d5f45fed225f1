//! Compressed-column sparse matrices and a cached sparse Cholesky factor.
//!
//! Row indices inside each column are kept sorted and duplicate entries are
//! summed in insertion order, so two assemblies from the same triplets produce
//! bit-identical patterns and values.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Side};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        // stable: duplicates are summed in insertion order
        order.sort_by_key(|&k| (triplets[k].1, triplets[k].0));

        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
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

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(row, value)` over the stored entries of column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for (r, v) in self.column(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|c| self.column(c).map(|(r, v)| v * x[r]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                triplets.push((c, r, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// Sparse product `A B`.
    pub fn mul(&self, other: &CscMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows, "inner dimensions differ");
        let mut col_ptr = Vec::with_capacity(other.ncols + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut work = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for (k, bkj) in other.column(j) {
                for (i, aik) in self.column(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        work[i] = 0.0;
                        touched.push(i);
                    }
                    work[i] += aik * bkj;
                }
            }
            touched.sort_unstable();
            for &i in &touched {
                row_idx.push(i);
                values.push(work[i]);
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `alpha * A + beta * B` with a merged pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CscMatrix, beta: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for c in 0..self.ncols {
            triplets.extend(self.column(c).map(|(r, v)| (r, c, alpha * v)));
            triplets.extend(other.column(c).map(|(r, v)| (r, c, beta * v)));
        }
        Self::from_triplets(self.nrows, self.ncols, &triplets)
    }

    /// Restriction to the given rows and columns, renumbered in list order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut row_map = vec![usize::MAX; self.nrows];
        for (k, &r) in rows.iter().enumerate() {
            row_map[r] = k;
        }
        let mut triplets = Vec::new();
        for (k, &c) in cols.iter().enumerate() {
            for (r, v) in self.column(c) {
                if row_map[r] != usize::MAX {
                    triplets.push((row_map[r], k, v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &triplets)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                d[r][c] += v;
            }
        }
        d
    }

    /// Largest absolute entry of `A - Aᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let diff = self.add_scaled(1.0, &t, -1.0);
        diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn to_faer(&self) -> SparseColMat<usize, f64> {
        let symbolic = SymbolicSparseColMat::new_checked(
            self.nrows,
            self.ncols,
            self.col_ptr.clone(),
            None,
            self.row_idx.clone(),
        );
        SparseColMat::new(symbolic, self.values.clone())
    }
}

/// Sparse `L Lᵀ` factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl SparseCholesky {
    pub fn factor(matrix: &CscMatrix) -> Result<Self> {
        if matrix.nrows != matrix.ncols {
            return Err(Error::mismatch(
                "Cholesky input",
                "square matrix",
                format!("{}x{}", matrix.nrows, matrix.ncols),
            ));
        }
        let llt = matrix
            .to_faer()
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { n: matrix.nrows, llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A X = B` for every column of `B` in place.
    pub fn solve_columns(&self, columns: &mut [Vec<f64>]) {
        if columns.is_empty() {
            return;
        }
        for col in columns.iter() {
            assert_eq!(col.len(), self.n, "right-hand side length");
        }
        let mut rhs = Mat::<f64>::from_fn(self.n, columns.len(), |i, j| columns[j][i]);
        self.llt.solve_in_place(rhs.as_mut());
        for (j, col) in columns.iter_mut().enumerate() {
            for (i, x) in col.iter_mut().enumerate() {
                *x = rhs[(i, j)];
            }
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut cols = [rhs.to_vec()];
        self.solve_columns(&mut cols);
        let [x] = cols;
        x
    }
}

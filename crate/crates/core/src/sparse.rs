//! Compressed sparse row storage for the square matrices used as GMRF
//! precision structures.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds an `n × n` matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed and exact zeros are dropped.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r},{c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut m = Self {
            n,
            row_ptr,
            col_idx,
            values,
        };
        m.prune_zeros();
        m
    }

    fn prune_zeros(&mut self) {
        if self.values.iter().all(|v| *v != T::zero()) {
            return;
        }
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut col_idx = Vec::with_capacity(self.col_idx.len());
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.values[k] != T::zero() {
                    col_idx.push(self.col_idx[k]);
                    values.push(self.values[k]);
                }
            }
            row_ptr[i + 1] = col_idx.len();
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.values = values;
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(m: &DMatrix<T>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let n = m.nrows();
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != T::zero() {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, triplets)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => T::zero(),
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).fold(T::zero(), |acc, (j, v)| acc + v * x[j]))
            .collect()
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        assert_eq!(x.len(), self.n);
        let mut total = T::zero();
        for i in 0..self.n {
            if x[i] == T::zero() {
                continue;
            }
            let row = self.row(i).fold(T::zero(), |acc, (j, v)| acc + v * x[j]);
            total += x[i] * row;
        }
        total
    }

    /// `xᵀ M y`.
    pub fn bilinear(&self, x: &[T], y: &[T]) -> T {
        let my = self.mul_vec(y);
        x.iter().zip(&my).fold(T::zero(), |acc, (a, b)| acc + *a * *b)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn mul_dvector(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| *v * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, v| acc.max(v.magnitude()))
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.triplets().all(|(i, j, v)| (v - self.get(j, i)).magnitude() <= tol)
    }

    /// Kronecker product `A ⊗ B`. Entry `(i·nb + k, j·nb + l) = A[i,j]·B[k,l]`.
    pub fn kron(a: &Self, b: &Self) -> Self {
        let nb = b.n;
        let n = a.n * nb;
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::with_capacity(a.nnz() * b.nnz());
        let mut values = Vec::with_capacity(a.nnz() * b.nnz());
        for i in 0..a.n {
            for k in 0..nb {
                for (j, av) in a.row(i) {
                    for (l, bv) in b.row(k) {
                        col_idx.push(j * nb + l);
                        values.push(av * bv);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        let mut m = Self {
            n,
            row_ptr,
            col_idx,
            values,
        };
        m.prune_zeros();
        m
    }

    /// Writes the matrix in Matrix Market coordinate format (`general`,
    /// 1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {}", i + 1, j + 1, v.to_f64_lossy())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_zeros_dropped() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 0.0), (0, 1, -1.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(0, 1), -1.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn kron_matches_dense() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0)]);
        let b = CsrMatrix::from_triplets(2, vec![(0, 0, 4.0), (1, 0, 5.0)]);
        let k = CsrMatrix::kron(&a, &b).to_dense();
        let ad = a.to_dense();
        let bd = b.to_dense();
        assert_eq!(k, ad.kronecker(&bd));
    }

    #[test]
    fn quad_form_agrees_with_dense() {
        let m = CsrMatrix::from_triplets(
            3,
            vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0), (2, 2, 1.0)],
        );
        let x = [1.0f64, 2.0, -3.0];
        let d = m.to_dense();
        let xv = DVector::from_row_slice(&x);
        let expected = (xv.transpose() * &d * &xv)[(0, 0)];
        assert!((m.quad_form(&x) - expected).abs() < 1e-12);
        assert!((m.bilinear(&x, &x) - expected).abs() < 1e-12);
    }

    #[test]
    fn matrix_market_header() {
        let m = CsrMatrix::<f64>::identity(2);
        let mut buf = Vec::new();
        m.write_matrix_market(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n"));
    }
}

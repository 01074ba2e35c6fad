//! Symmetric banded matrices and their Cholesky factors.

use crate::error::{Error, Result};

/// Lower band of a symmetric `n × n` matrix with half-bandwidth `bw`,
/// stored row by row (`bw + 1` slots per row, diagonal last).
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` at `(i, j)`; entries above the diagonal are mirrored, entries
    /// outside the band are a caller error.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let a = self.data[self.slot(i, j)];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }
}

/// `A = L Lᵀ` for a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    l: BandMatrix,
}

impl BandedCholesky {
    pub fn factor(a: BandMatrix) -> Result<Self> {
        let mut l = a;
        let (n, bw) = (l.n, l.bw);
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut sum = l.data[l.slot(i, j)];
                for k in lo..j {
                    sum -= l.data[l.slot(i, k)] * l.data[l.slot(j, k)];
                }
                let s = l.slot(i, j);
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::Singular(format!("band matrix not positive definite at row {i}")));
                    }
                    l.data[s] = sum.sqrt();
                } else {
                    l.data[s] = sum / l.data[l.slot(j, j)];
                }
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.n
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let l = &self.l;
        for i in 0..l.n {
            let mut s = b[i];
            for k in i.saturating_sub(l.bw)..i {
                s -= l.data[l.slot(i, k)] * b[k];
            }
            b[i] = s / l.data[l.slot(i, i)];
        }
    }

    /// Solves `Lᵀ x = y` in place. With `y ~ N(0, I)` the result is
    /// distributed as `N(0, A⁻¹)`.
    pub fn solve_upper(&self, y: &mut [f64]) {
        let l = &self.l;
        for i in (0..l.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + l.bw + 1).min(l.n) {
                s -= l.data[l.slot(k, i)] * y[k];
            }
            y[i] = s / l.data[l.slot(i, i)];
        }
    }

    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }
}

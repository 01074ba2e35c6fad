//! Local polynomial regression (LOESS) without robustness iterations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SPAN: f64 = 0.75;
pub const DEFAULT_DEGREE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSeries<T> {
    pub x: Vec<T>,
    pub values: Vec<T>,
    pub span: T,
    pub degree: usize,
}

/// Number of neighbours used for each local fit: `ceil(span · n)`, raised
/// to `degree + 1` so the local system stays determined.
pub fn neighbourhood_size<T: Scalar>(n: usize, span: T, degree: usize) -> usize {
    let q = (span * T::from_usize_lossy(n)).ceil().to_f64_lossy() as usize;
    q.clamp(degree + 1, n)
}

/// Tricube weight `(1 − u³)³` for `u = d / d_max` in `[0, 1]`.
pub fn tricube<T: Scalar>(u: T) -> T {
    if u >= T::one() {
        return T::zero();
    }
    let v = T::one() - u * u * u;
    v * v * v
}

/// Smooths `y` observed at `x`. Each output value is the intercept of a
/// weighted least-squares polynomial of the given degree centred at that
/// point, fitted to its `ceil(span · n)` nearest neighbours with tricube
/// weights scaled by the distance to the farthest of them.
pub fn loess_smooth<T: Scalar>(x: &[T], y: &[T], span: T, degree: usize) -> Result<SmoothedSeries<T>> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::Dimension(format!("{} abscissae for {} values", x.len(), n)));
    }
    if !(1..=2).contains(&degree) {
        return Err(Error::OutOfRange(format!("LOESS degree {degree} (expected 1 or 2)")));
    }
    if !(span > T::zero() && span <= T::one()) {
        return Err(Error::OutOfRange(format!("LOESS span {span} (expected 0 < span <= 1)")));
    }
    let min_len = 5.max(degree + 2);
    if n < min_len {
        return Err(Error::InsufficientData(format!(
            "LOESS needs at least {min_len} points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LOESS input".into()));
    }

    let q = neighbourhood_size(n, span, degree);
    let mut order: Vec<usize> = (0..n).collect();
    let mut values = Vec::with_capacity(n);
    for &x0 in x {
        order.sort_by(|&a, &b| {
            (x[a] - x0)
                .abs()
                .partial_cmp(&(x[b] - x0).abs())
                .expect("finite")
                .then(a.cmp(&b))
        });
        let near = &order[..q];
        let d_max = (x[near[q - 1]] - x0).abs();
        let mut a = DMatrix::<T>::zeros(q, degree + 1);
        let mut b = DVector::<T>::zeros(q);
        for (r, &j) in near.iter().enumerate() {
            let w = if d_max > T::zero() {
                tricube((x[j] - x0).abs() / d_max)
            } else {
                T::one()
            };
            let sw = w.sqrt();
            // Scaled offsets keep the local system well conditioned.
            let u = if d_max > T::zero() {
                (x[j] - x0) / d_max
            } else {
                T::zero()
            };
            let mut p = T::one();
            for c in 0..=degree {
                a[(r, c)] = sw * p;
                p *= u;
            }
            b[r] = sw * y[j];
        }
        let coef = a
            .svd(true, true)
            .solve(&b, T::lit(1e-12))
            .map_err(|e| Error::Singular(format!("LOESS local fit: {e}")))?;
        values.push(coef[0]);
    }
    Ok(SmoothedSeries {
        x: x.to_vec(),
        values,
        span,
        degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn reproduces_lines_and_constants() {
        let x = grid(20);
        let line: Vec<f64> = x.iter().map(|t| 1.5 - 0.3 * t).collect();
        for degree in [1, 2] {
            let s = loess_smooth(&x, &line, 0.75, degree).unwrap();
            for (a, b) in s.values.iter().zip(&line) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let flat = vec![2.0; 9];
        let s = loess_smooth(&grid(9), &flat, 0.5, 2).unwrap();
        assert!(s.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn works_in_f32() {
        let x: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let y: Vec<f32> = x.iter().map(|t| 2.0 * t + 1.0).collect();
        let s = loess_smooth(&x, &y, 0.8f32, 1).unwrap();
        assert!(s.values.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn rejects_bad_input() {
        let x = grid(4);
        assert!(matches!(loess_smooth(&x, &x, 0.75, 2), Err(Error::InsufficientData(_))));
        let x = grid(10);
        assert!(matches!(loess_smooth(&x, &x, 0.0, 2), Err(Error::OutOfRange(_))));
        assert!(matches!(loess_smooth(&x, &x, 1.2, 2), Err(Error::OutOfRange(_))));
        assert!(matches!(loess_smooth(&x, &x, 0.5, 3), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn neighbourhood_rounds_up() {
        assert_eq!(neighbourhood_size(10, 0.75, 2), 8);
        assert_eq!(neighbourhood_size(10, 0.05, 2), 3);
        assert_eq!(neighbourhood_size(10, 1.0, 1), 10);
    }
}

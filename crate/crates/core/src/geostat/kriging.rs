use log::warn;
use nalgebra::{DMatrix, DVector, LU};

use super::variogram::{distance, StationValue, VariogramModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigingEstimate<T> {
    pub target: [T; 2],
    pub value: T,
    pub variance: T,
}

/// Ordinary kriging predictor with the system
///
/// ```text
/// [ Γ  1 ] [ λ ]   [ γ₀ ]
/// [ 1ᵀ 0 ] [ m ] = [ 1  ]
/// ```
///
/// factorised once and reused for every target.
#[derive(Debug, Clone)]
pub struct OrdinaryKriging<T: Scalar> {
    stations: Vec<StationValue<T>>,
    model: VariogramModel<T>,
    lu: LU<T, nalgebra::Dyn, nalgebra::Dyn>,
}

fn system_matrix<T: Scalar>(stations: &[StationValue<T>], model: &VariogramModel<T>) -> DMatrix<T> {
    let n = stations.len();
    let mut k = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..i {
            let g = model.semivariance(distance(stations[i].location, stations[j].location));
            k[(i, j)] = g;
            k[(j, i)] = g;
        }
        k[(i, n)] = T::one();
        k[(n, i)] = T::one();
    }
    k
}

fn is_singular<T: Scalar>(lu: &LU<T, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let diag: Vec<T> = u.diagonal().iter().map(|v| v.magnitude()).collect();
    let max = diag.iter().fold(T::zero(), |a, v| a.max(*v));
    let min = diag.iter().fold(max, |a, v| a.min(*v));
    let n = T::from_usize_lossy(diag.len());
    max == T::zero() || !min.is_finite() || min <= max * n * T::eps() * T::lit(16.0)
}

/// Merges stations sharing a location (within `tol`) by averaging values.
pub fn merge_duplicates<T: Scalar>(stations: &[StationValue<T>], tol: T) -> Vec<StationValue<T>> {
    let mut groups: Vec<(StationValue<T>, usize)> = Vec::new();
    for s in stations {
        match groups.iter_mut().find(|(g, _)| distance(g.location, s.location) <= tol) {
            Some((g, count)) => {
                g.value += s.value;
                *count += 1;
            }
            None => groups.push((*s, 1)),
        }
    }
    groups
        .into_iter()
        .map(|(mut g, c)| {
            g.value /= T::from_usize_lossy(c);
            g
        })
        .collect()
}

impl<T: Scalar> OrdinaryKriging<T> {
    pub fn new(stations: &[StationValue<T>], model: VariogramModel<T>) -> Result<Self> {
        model.validate()?;
        if stations.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "ordinary kriging needs at least 2 stations, got {}",
                stations.len()
            )));
        }
        let lu = LU::new(system_matrix(stations, &model));
        if !is_singular(&lu) {
            return Ok(Self {
                stations: stations.to_vec(),
                model,
                lu,
            });
        }
        let merged = merge_duplicates(stations, T::lit(1e-9));
        if merged.len() < stations.len() {
            warn!(
                "kriging system singular; merged {} duplicate station locations",
                stations.len() - merged.len()
            );
        }
        if merged.len() >= 2 {
            let lu = LU::new(system_matrix(&merged, &model));
            if !is_singular(&lu) {
                return Ok(Self {
                    stations: merged,
                    model,
                    lu,
                });
            }
        }
        Err(Error::Singular(format!(
            "ordinary kriging system with {} stations ({} distinct locations)",
            stations.len(),
            merged.len()
        )))
    }

    pub fn stations(&self) -> &[StationValue<T>] {
        &self.stations
    }

    pub fn model(&self) -> &VariogramModel<T> {
        &self.model
    }

    /// Kriging weights `λ` and the Lagrange multiplier `m` for one target.
    pub fn weights(&self, target: [T; 2]) -> (Vec<T>, T) {
        let n = self.stations.len();
        let mut rhs = DVector::zeros(n + 1);
        for (i, s) in self.stations.iter().enumerate() {
            rhs[i] = self.model.semivariance(distance(s.location, target));
        }
        rhs[n] = T::one();
        let sol = self.lu.solve(&rhs).expect("factorisation checked at construction");
        let lambda = sol.rows(0, n).iter().copied().collect();
        (lambda, sol[n])
    }

    pub fn predict(&self, target: [T; 2]) -> KrigingEstimate<T> {
        let n = self.stations.len();
        let (lambda, m) = self.weights(target);
        let mut value = T::zero();
        let mut variance = m;
        for i in 0..n {
            let s = &self.stations[i];
            value += lambda[i] * s.value;
            variance += lambda[i] * self.model.semivariance(distance(s.location, target));
        }
        KrigingEstimate {
            target,
            value,
            variance: variance.max(T::zero()),
        }
    }
}

pub fn ordinary_kriging<T: Scalar>(
    stations: &[StationValue<T>],
    model: VariogramModel<T>,
    targets: &[[T; 2]],
) -> Result<Vec<KrigingEstimate<T>>> {
    let ok = OrdinaryKriging::new(stations, model)?;
    Ok(targets.iter().map(|t| ok.predict(*t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geostat::variogram::VariogramFamily;

    fn stations() -> Vec<StationValue<f64>> {
        [
            (0.0, 0.0, 1.0),
            (10.0, 0.0, 3.0),
            (0.0, 10.0, 2.0),
            (7.0, 8.0, 5.0),
            (3.0, 4.0, 0.5),
        ]
        .iter()
        .map(|&(x, y, v)| StationValue {
            location: [x, y],
            value: v,
        })
        .collect()
    }

    fn model(nugget: f64) -> VariogramModel<f64> {
        VariogramModel::new(VariogramFamily::Exponential, nugget, 2.0, 6.0).unwrap()
    }

    #[test]
    fn exact_at_stations() {
        let st = stations();
        let targets: Vec<_> = st.iter().map(|s| s.location).collect();
        let est = ordinary_kriging(&st, model(0.0), &targets).unwrap();
        for (e, s) in est.iter().zip(&st) {
            assert!((e.value - s.value).abs() < 1e-10);
            assert!(e.variance.abs() < 1e-10);
        }
    }

    #[test]
    fn weights_sum_to_one_and_constant_field() {
        let mut st = stations();
        st.iter_mut().for_each(|s| s.value = 7.5);
        let ok = OrdinaryKriging::new(&st, model(0.3)).unwrap();
        for t in [[1.0, 1.0], [20.0, -4.0], [5.0, 5.0]] {
            let (w, _) = ok.weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((ok.predict(t).value - 7.5).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicates_are_merged() {
        let mut st = stations();
        st.push(StationValue {
            location: [10.0, 0.0],
            value: 5.0,
        });
        let ok = OrdinaryKriging::new(&st, model(0.0)).unwrap();
        assert_eq!(ok.stations().len(), 5);
        assert!((ok.predict([10.0, 0.0]).value - 4.0).abs() < 1e-10);
    }

    #[test]
    fn all_coincident_is_an_error() {
        let st = vec![
            StationValue {
                location: [1.0, 1.0],
                value: 1.0
            };
            3
        ];
        assert!(matches!(OrdinaryKriging::new(&st, model(0.0)), Err(Error::Singular(_))));
    }
}

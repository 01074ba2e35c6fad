use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Scalar;

/// A station value at a planar location (km).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationValue<T> {
    pub location: [T; 2],
    pub value: T,
}

#[inline]
pub(crate) fn distance<T: Scalar>(a: [T; 2], b: [T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramFamily {
    Exponential,
    Spherical,
    Gaussian,
}

impl VariogramFamily {
    pub const ALL: [VariogramFamily; 3] = [Self::Exponential, Self::Spherical, Self::Gaussian];
}

impl fmt::Display for VariogramFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exponential => "exponential",
            Self::Spherical => "spherical",
            Self::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramModel<T> {
    pub family: VariogramFamily,
    pub nugget: T,
    pub partial_sill: T,
    pub range: T,
}

impl<T: Scalar> VariogramModel<T> {
    pub fn new(family: VariogramFamily, nugget: T, partial_sill: T, range: T) -> Result<Self> {
        let m = Self {
            family,
            nugget,
            partial_sill,
            range,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nugget >= T::zero()
            && self.partial_sill >= T::zero()
            && self.range > T::zero()
            && self.nugget.is_finite()
            && self.partial_sill.is_finite()
            && self.range.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::FitFailed(format!(
                "invalid variogram parameters: nugget {}, partial sill {}, range {}",
                self.nugget, self.partial_sill, self.range
            )))
        }
    }

    pub fn sill(&self) -> T {
        self.nugget + self.partial_sill
    }

    /// Shape function in `[0, 1]` of the structured part.
    fn shape(&self, h: T) -> T {
        let r = h / self.range;
        match self.family {
            VariogramFamily::Exponential => T::one() - (-r).exp(),
            VariogramFamily::Gaussian => T::one() - (-(r * r)).exp(),
            VariogramFamily::Spherical => {
                if r >= T::one() {
                    T::one()
                } else {
                    T::lit(1.5) * r - T::lit(0.5) * r * r * r
                }
            }
        }
    }

    /// Semivariance `γ(h)`, with `γ(0) = 0` (the nugget is a discontinuity
    /// at the origin).
    pub fn semivariance(&self, h: T) -> T {
        if h <= T::zero() {
            T::zero()
        } else {
            self.nugget + self.partial_sill * self.shape(h)
        }
    }
}

/// One bin of the empirical semivariogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin<T> {
    /// Mean pair distance in the bin.
    pub h: T,
    pub gamma: T,
    pub pairs: usize,
}

/// Classical (Matheron) estimator over `n_bins` equal-width distance bins
/// `(k·w, (k+1)·w]` with `w = max_dist / n_bins`. Empty bins are omitted.
pub fn empirical_variogram<T: Scalar>(
    obs: &[StationValue<T>],
    n_bins: usize,
    max_dist: T,
) -> Result<Vec<VariogramBin<T>>> {
    if obs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "empirical variogram needs at least 2 observations, got {}",
            obs.len()
        )));
    }
    if !(max_dist > T::zero()) || n_bins == 0 {
        return Err(Error::OutOfRange("max_dist must be positive and n_bins ≥ 1".into()));
    }
    let width = max_dist / T::from_usize_lossy(n_bins);
    let mut sum_h = vec![T::zero(); n_bins];
    let mut sum_sq = vec![T::zero(); n_bins];
    let mut count = vec![0usize; n_bins];
    for (a, oa) in obs.iter().enumerate() {
        for ob in &obs[a + 1..] {
            let d = distance(oa.location, ob.location);
            if d > max_dist {
                continue;
            }
            let k = if d <= T::zero() {
                0
            } else {
                // (k·w, (k+1)·w]: ceil(d / w) − 1
                let pos = (d / width).ceil().to_f64_lossy() as usize;
                pos.saturating_sub(1).min(n_bins - 1)
            };
            let diff = oa.value - ob.value;
            sum_h[k] += d;
            sum_sq[k] += diff * diff;
            count[k] += 1;
        }
    }
    Ok((0..n_bins)
        .filter(|&k| count[k] > 0)
        .map(|k| {
            let c = T::from_usize_lossy(count[k]);
            VariogramBin {
                h: sum_h[k] / c,
                gamma: sum_sq[k] / (T::lit(2.0) * c),
                pairs: count[k],
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions<T> {
    /// Variance of the raw values, used as the initial sill. Falls back to
    /// the largest binned semivariance.
    pub sample_variance: Option<T>,
}

#[derive(Debug, Clone)]
pub struct VariogramFit<T> {
    pub model: VariogramModel<T>,
    pub objective: T,
    /// Best objective reached by each candidate family.
    pub per_family: Vec<(VariogramFamily, T)>,
}

fn wls_objective<T: Scalar>(bins: &[VariogramBin<T>], model: &VariogramModel<T>) -> T {
    bins.iter().fold(T::zero(), |acc, b| {
        let r = b.gamma - model.semivariance(b.h);
        acc + T::from_usize_lossy(b.pairs) / (b.h * b.h) * r * r
    })
}

/// Weighted least squares fit with weights `pairs / h²`, multi-started from
/// data-driven initial values; the family with the smallest objective wins.
/// A pure-nugget model is preferred when it fits as well as the best
/// structured candidate.
pub fn fit_variogram<T: Scalar>(
    bins: &[VariogramBin<T>],
    families: &[VariogramFamily],
    opts: &FitOptions<T>,
) -> Result<VariogramFit<T>> {
    let bins: Vec<VariogramBin<T>> = bins
        .iter()
        .copied()
        .filter(|b| b.pairs > 0 && b.h > T::zero())
        .collect();
    if bins.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs at least 3 nonempty bins, got {}",
            bins.len()
        )));
    }
    if families.is_empty() {
        return Err(Error::FitFailed("no candidate families".into()));
    }
    let max_h = bins.iter().fold(T::zero(), |a, b| a.max(b.h));
    let min_gamma = bins.iter().fold(bins[0].gamma, |a, b| a.min(b.gamma));
    let max_gamma = bins.iter().fold(T::zero(), |a, b| a.max(b.gamma));
    let sill0 = opts
        .sample_variance
        .filter(|v| *v > T::zero() && v.is_finite())
        .unwrap_or(max_gamma);
    let nugget0 = min_gamma.max(T::zero());
    let psill0 = (sill0 - nugget0).max(max_gamma * T::lit(0.1)).max(T::lit(1e-12));
    let range0 = max_h / T::lit(2.0);
    let range_floor = max_h * T::lit(1e-6);

    // Unconstrained coordinates: nugget = a², partial sill = b²,
    // range = c² + floor.
    let decode = |family: VariogramFamily, x: &[T]| VariogramModel {
        family,
        nugget: x[0] * x[0],
        partial_sill: x[1] * x[1],
        range: x[2] * x[2] + range_floor,
    };
    let nm = NelderMeadOptions {
        max_iter: 3000,
        f_tol: 0.0,
        x_tol: 1e-10,
        initial_step: 0.2,
    };

    let mut per_family = Vec::new();
    let mut best: Option<(VariogramModel<T>, T)> = None;
    for &family in families {
        let objective = |x: &[T]| wls_objective(&bins, &decode(family, x));
        let mut family_best: Option<(Vec<T>, T)> = None;
        for &rf in &[0.25, 1.0, 2.5] {
            for with_nugget in [false, true] {
                let nugget = if with_nugget { nugget0 } else { T::zero() };
                let psill = if with_nugget { psill0 } else { psill0 + nugget0 };
                let range = (range0 * T::lit(rf) - range_floor).max(range_floor);
                let start = [nugget.sqrt(), psill.sqrt(), range.sqrt()];
                let mut m = nelder_mead(objective, &start, &nm);
                // Restart from the optimum to escape premature collapse.
                for _ in 0..2 {
                    let again = nelder_mead(objective, &m.x, &nm);
                    if again.value <= m.value {
                        m = again;
                    }
                }
                if m.value.is_finite() && family_best.as_ref().is_none_or(|(_, v)| m.value < *v) {
                    family_best = Some((m.x, m.value));
                }
            }
        }
        if let Some((x, v)) = family_best {
            per_family.push((family, v));
            let model = decode(family, &x);
            if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                best = Some((model, v));
            }
        }
    }
    let (mut model, mut objective) = best.ok_or_else(|| {
        Error::FitFailed(format!(
            "no family converged; tried {families:?} on {} bins",
            bins.len()
        ))
    })?;

    // Pure nugget: weighted mean of the binned semivariances.
    let (sw, swg) = bins.iter().fold((T::zero(), T::zero()), |(sw, swg), b| {
        let w = T::from_usize_lossy(b.pairs) / (b.h * b.h);
        (sw + w, swg + w * b.gamma)
    });
    let flat = VariogramModel {
        family: model.family,
        nugget: swg / sw,
        partial_sill: T::zero(),
        range: model.range,
    };
    let flat_obj = wls_objective(&bins, &flat);
    let scale = bins.iter().fold(T::zero(), |a, b| {
        a + T::from_usize_lossy(b.pairs) / (b.h * b.h) * b.gamma * b.gamma
    });
    if flat_obj <= objective + T::lit(1e-9) * scale {
        model = flat;
        objective = flat_obj;
    }
    model.validate()?;
    Ok(VariogramFit {
        model,
        objective,
        per_family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(x: f64, y: f64, v: f64) -> StationValue<f64> {
        StationValue {
            location: [x, y],
            value: v,
        }
    }

    #[test]
    fn semivariance_basics() {
        for family in VariogramFamily::ALL {
            let m = VariogramModel::new(family, 0.5, 2.0, 10.0).unwrap();
            assert_eq!(m.semivariance(0.0), 0.0);
            let mut prev = 0.0;
            for k in 1..200 {
                let g = m.semivariance(k as f64 * 0.5);
                assert!(g >= prev);
                prev = g;
            }
            assert!((m.semivariance(1e4) - 2.5).abs() < 1e-9);
        }
        assert!(VariogramModel::new(VariogramFamily::Spherical, -1.0, 1.0, 1.0).is_err());
        assert!(VariogramModel::new(VariogramFamily::Spherical, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn two_stations() {
        let bins = empirical_variogram(&[sv(0.0, 0.0, 1.0), sv(10.0, 0.0, 3.0)], 4, 20.0).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].gamma, 2.0);
        assert_eq!(bins[0].h, 10.0);
    }

    #[test]
    fn too_few_observations() {
        assert!(matches!(
            empirical_variogram(&[sv(0.0, 0.0, 1.0)], 4, 20.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn constant_field_is_zero() {
        let obs: Vec<_> = (0..12)
            .map(|k| sv((k * 7 % 11) as f64, (k * 3 % 5) as f64, 4.2))
            .collect();
        let bins = empirical_variogram(&obs, 6, 15.0).unwrap();
        assert!(!bins.is_empty());
        assert!(bins.iter().all(|b| b.gamma == 0.0));
    }

    #[test]
    fn values_equal_coordinates_on_a_line() {
        // Pairs at distance d have squared difference d², so γ̂(d) = d²/2.
        let obs: Vec<_> = (0..5).map(|k| sv(k as f64, 0.0, k as f64)).collect();
        let bins = empirical_variogram(&obs, 4, 4.0).unwrap();
        let expected = [(1.0, 0.5, 4), (2.0, 2.0, 3), (3.0, 4.5, 2), (4.0, 8.0, 1)];
        assert_eq!(bins.len(), 4);
        for (b, (h, g, n)) in bins.iter().zip(expected) {
            assert_eq!((b.h, b.gamma, b.pairs), (h, g, n));
        }
    }

    fn synthetic_bins(model: &VariogramModel<f64>) -> Vec<VariogramBin<f64>> {
        (1..=15)
            .map(|k| {
                let h = k as f64;
                VariogramBin {
                    h,
                    gamma: model.semivariance(h),
                    pairs: 20 + k,
                }
            })
            .collect()
    }

    #[test]
    fn exponential_roundtrip() {
        let truth = VariogramModel::new(VariogramFamily::Exponential, 0.0, 1.0, 5.0).unwrap();
        let fit = fit_variogram(
            &synthetic_bins(&truth),
            &[VariogramFamily::Exponential],
            &FitOptions::default(),
        )
        .unwrap();
        assert!((fit.model.partial_sill - 1.0).abs() / 1.0 < 1e-4, "{:?}", fit.model);
        assert!((fit.model.range - 5.0).abs() / 5.0 < 1e-4, "{:?}", fit.model);
        assert!(fit.model.nugget < 1e-4);
    }

    #[test]
    fn flat_bins_are_pure_nugget() {
        let bins: Vec<_> = (1..=8)
            .map(|k| VariogramBin {
                h: k as f64 * 2.0,
                gamma: 3.0,
                pairs: 10,
            })
            .collect();
        let fit = fit_variogram(&bins, &VariogramFamily::ALL, &FitOptions::default()).unwrap();
        assert!((fit.model.nugget - 3.0).abs() < 1e-9);
        assert_eq!(fit.model.partial_sill, 0.0);
    }

    #[test]
    fn spherical_is_selected_for_spherical_data() {
        let truth = VariogramModel::new(VariogramFamily::Spherical, 0.2, 1.5, 9.0).unwrap();
        let fit = fit_variogram(&synthetic_bins(&truth), &VariogramFamily::ALL, &FitOptions::default()).unwrap();
        assert_eq!(fit.model.family, VariogramFamily::Spherical);
        let sph = fit
            .per_family
            .iter()
            .find(|(f, _)| *f == VariogramFamily::Spherical)
            .unwrap()
            .1;
        for (f, v) in &fit.per_family {
            if *f != VariogramFamily::Spherical {
                assert!(*v > sph);
            }
        }
    }

    #[test]
    fn too_few_bins() {
        let bins = vec![
            VariogramBin {
                h: 1.0,
                gamma: 1.0,
                pairs: 3
            };
            2
        ];
        assert!(fit_variogram(&bins, &VariogramFamily::ALL, &FitOptions::default()).is_err());
    }
}

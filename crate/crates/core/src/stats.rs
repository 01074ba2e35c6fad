//! Summary statistics for posterior draws.

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(x: &[f64]) -> f64 {
    if let Some(&first) = x.first() {
        if x.iter().all(|&v| v == first) {
            return first;
        }
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with divisor `n − 1`; zero for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn sd(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(x), p)
}

/// Split potential scale reduction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rhat {
    pub value: f64,
    /// All draws identical within every half-chain; `value` is then 1.0
    /// (or infinite when half-chains sit at different constants).
    pub degenerate: bool,
}

/// Split-R̂ over chains of equal length: each chain is cut into two halves
/// (dropping the middle draw when odd) and the classic between/within
/// variance ratio is taken over the halves.
pub fn split_rhat(chains: &[&[f64]]) -> Rhat {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return Rhat {
            value: f64::NAN,
            degenerate: true,
        };
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[c.len() - half..]);
    }
    let n = half as f64;
    let m = parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let grand = mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = parts.iter().map(|p| variance(p)).sum::<f64>() / m;
    if w == 0.0 {
        return Rhat {
            value: if b == 0.0 { 1.0 } else { f64::INFINITY },
            degenerate: true,
        };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Rhat {
        value: (var_plus / w).sqrt(),
        degenerate: false,
    }
}

/// `ln(k!)`.
pub fn ln_factorial(k: u64) -> f64 {
    statrs::function::factorial::ln_factorial(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&x, 0.5) - 50.5).abs() < 1e-12);
        assert!((quantile(&x, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile(&x, 0.975) - 97.525).abs() < 1e-12);
        assert_eq!(quantile(&[4.0], 0.3), 4.0);
    }

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(variance(&[5.0]), 0.0);
    }

    #[test]
    fn rhat_cases() {
        let c = vec![2.0; 50];
        let r = split_rhat(&[&c, &c]);
        assert_eq!(
            r,
            Rhat {
                value: 1.0,
                degenerate: true
            }
        );
        let a: Vec<f64> = (0..200).map(|k| ((k * 37) % 101) as f64).collect();
        let b: Vec<f64> = (0..200).map(|k| ((k * 53) % 101) as f64).collect();
        let r = split_rhat(&[&a, &b]);
        assert!(!r.degenerate && r.value < 1.05);
        let shifted: Vec<f64> = b.iter().map(|v| v + 500.0).collect();
        assert!(split_rhat(&[&a, &shifted]).value > 2.0);
    }

    #[test]
    fn log_factorials() {
        assert_eq!(ln_factorial(0), 0.0);
        assert!((ln_factorial(3) - 6f64.ln()).abs() < 1e-12);
    }
}

//! Derivative-free minimisation (Nelder–Mead) used by variogram fitting.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Stop when the simplex diameter falls below this.
    pub x_tol: f64,
    /// Initial simplex edge, relative to each coordinate (absolute when the
    /// coordinate is zero).
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            f_tol: 1e-20,
            x_tol: 1e-12,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

pub fn nelder_mead<T, F>(f: F, start: &[T], opts: &NelderMeadOptions) -> Minimum<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let n = start.len();
    let eval = |x: &[T]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
        }
    };
    let step = T::lit(opts.initial_step);
    let mut simplex: Vec<Vec<T>> = vec![start.to_vec()];
    for k in 0..n {
        let mut p = start.to_vec();
        p[k] = if p[k] == T::zero() {
            step
        } else {
            p[k] * (T::one() + step)
        };
        simplex.push(p);
    }
    let mut values: Vec<T> = simplex.iter().map(|p| eval(p)).collect();

    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    let f_tol = T::lit(opts.f_tol);
    let x_tol = T::lit(opts.x_tol);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[n] - values[0]).magnitude();
        let diameter = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (*a - *b).magnitude()))
            .fold(T::zero(), |acc, v| acc.max(v));
        if spread <= f_tol && diameter <= x_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for p in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += *v;
            }
        }
        let nn = T::from_usize_lossy(n);
        centroid.iter_mut().for_each(|c| *c /= nn);
        let towards = |coef: T| -> Vec<T> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| *c + coef * (*c - *w))
                .collect()
        };

        let reflected = towards(alpha);
        let fr = eval(&reflected);
        if fr < values[0] {
            let expanded = towards(gamma);
            let fe = eval(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[n] {
            let c = towards(rho);
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = towards(-rho);
            let fc = eval(&c);
            (c, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = contracted;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for k in 1..=n {
            for (x, b) in simplex[k].iter_mut().zip(&best) {
                *x = *b + sigma * (*x - *b);
            }
            values[k] = eval(&simplex[k]);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

//! Derivative-free minimisation and finite-difference curvature.

/// Settings for [`nelder_mead`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    pub max_evaluations: usize,
    /// Stop when the spread of function values across the simplex falls below this.
    pub f_tol: f64,
    /// ...and every vertex lies within this distance of the best one (max norm).
    pub x_tol: f64,
    /// Number of restarts from the best point with a fresh simplex.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            max_evaluations: 4000,
            f_tol: 1e-8,
            x_tol: 1e-5,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimises `f` with the adaptive-coefficient Nelder–Mead simplex method.
/// Non-finite values are treated as `+∞`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> OptimResult {
    let n = x0.len();
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut count = 0;
    if n == 0 {
        let v = eval(x0, &mut count);
        return OptimResult {
            x: Vec::new(),
            value: v,
            evaluations: count,
            converged: true,
        };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut best = x0.to_vec();
    let mut best_val = eval(&best, &mut count);
    let mut converged = false;
    for round in 0..=opts.restarts {
        let step = opts.initial_step / (1 << round.min(4)) as f64;
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((best.clone(), best_val));
        for k in 0..n {
            let mut x = best.clone();
            x[k] += step;
            let v = eval(&x, &mut count);
            simplex.push((x, v));
        }
        converged = false;
        while count < opts.max_evaluations {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            let size = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread.abs() <= opts.f_tol && size <= opts.x_tol {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let xr = along(alpha);
            let fr = eval(&xr, &mut count);
            if fr < simplex[0].1 {
                let xe = along(gamma);
                let fe = eval(&xe, &mut count);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = along(alpha * rho);
                    let fc = eval(&xc, &mut count);
                    (xc, fc)
                } else {
                    let xc = along(-rho);
                    let fc = eval(&xc, &mut count);
                    (xc, fc)
                };
                if fc < fr.min(simplex[n].1) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for (x, v) in simplex.iter_mut().skip(1) {
                        for (xi, b) in x.iter_mut().zip(&x_best) {
                            *xi = b + sigma * (*xi - b);
                        }
                        *v = eval(x, &mut count);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let improved = best_val - simplex[0].1;
        best = simplex[0].0.clone();
        best_val = simplex[0].1;
        if count >= opts.max_evaluations || (round > 0 && converged && improved.abs() <= opts.f_tol) {
            break;
        }
    }
    OptimResult {
        x: best,
        value: best_val,
        evaluations: count,
        converged,
    }
}

/// Central-difference Hessian of `f` at `x` with per-coordinate steps `h`,
/// given `f(x)` as `f0`.
pub fn numeric_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], f0: f64, h: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut hess = vec![vec![0.0; n]; n];
    let mut at = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(k, s) in d {
            y[k] += s;
        }
        f(&y)
    };
    for i in 0..n {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], &NelderMeadOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r);
    }

    #[test]
    fn minimises_shifted_quadratic_in_six_dimensions() {
        let target = [0.3, -1.0, 2.0, 0.0, 4.0, -2.5];
        let f = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(k, (a, b))| (k + 1) as f64 * (a - b).powi(2))
                .sum::<f64>()
                + 0.3 * (x[0] - target[0]) * (x[1] - target[1])
        };
        let r = nelder_mead(f, &[0.0; 6], &NelderMeadOptions::default());
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{:?}", r.x);
        }
    }

    #[test]
    fn infinite_region_is_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.2).powi(2) };
        let r = nelder_mead(f, &[1.0], &NelderMeadOptions::default());
        assert!((r.x[0] - 0.2).abs() < 1e-4);
    }

    #[test]
    fn hessian_of_quadratic_is_exact() {
        let f = |x: &[f64]| 2.0 * x[0] * x[0] + 3.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        let h = numeric_hessian(f, &[0.4, -0.7], f(&[0.4, -0.7]), &[0.1, 0.1]);
        assert!((h[0][0] - 4.0).abs() < 1e-8);
        assert!((h[0][1] - 3.0).abs() < 1e-8);
        assert!((h[1][1] - 1.0).abs() < 1e-8);
    }
}

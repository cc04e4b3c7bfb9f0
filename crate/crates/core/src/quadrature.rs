//! Gauss–Hermite rules and adaptive Gauss–Hermite integration of log-densities.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for `∫ e^{-x²} f(x) dx`, computed by Golub–Welsch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrise to remove eigen-solver asymmetry.
        for k in 0..n / 2 {
            let (a, b) = (pairs[k], pairs[n - 1 - k]);
            let x = 0.5 * (b.0 - a.0);
            let w = 0.5 * (a.1 + b.1);
            pairs[k] = (-x, w);
            pairs[n - 1 - k] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `log ∫_{R²} exp(log_f(u)) du` by a tensor Gauss–Hermite rule centred at
/// `centre` and scaled by the lower Cholesky factor `l` of the covariance
/// `(-∇² log_f)⁻¹` at the centre.
pub fn adaptive_gh_2d<F: FnMut([f64; 2]) -> f64>(rule: &GaussHermite, centre: [f64; 2], l: [[f64; 2]; 2], mut log_f: F) -> f64 {
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut terms = Vec::with_capacity(rule.len() * rule.len());
    for (&xi, &wi) in rule.nodes.iter().zip(&rule.weights) {
        for (&xj, &wj) in rule.nodes.iter().zip(&rule.weights) {
            let z0 = sqrt2 * xi;
            let z1 = sqrt2 * xj;
            let u = [centre[0] + l[0][0] * z0, centre[1] + l[1][0] * z0 + l[1][1] * z1];
            terms.push(wi.ln() + wj.ln() + xi * xi + xj * xj + log_f(u));
        }
    }
    let log_jac = std::f64::consts::LN_2 + (l[0][0] * l[1][1]).abs().ln();
    log_sum_exp(&terms) + log_jac
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

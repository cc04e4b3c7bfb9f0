//! Small models shared by unit tests.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::Result;
use crate::gmrf::ConstraintSet;
use crate::lgm::{LatentModel, LgmInstance, LgmPattern, ObsRow, Response};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `y_j = x_{g(j)} + ε`, `x ~ N(0, τ_x⁻¹ I)`, `ε ~ N(0, τ_y⁻¹)`; θ = (log τ_y, log τ_x).
pub struct Conjugate {
    pub pattern: LgmPattern,
    pub y: Vec<f64>,
    pub groups: Vec<usize>,
    g: usize,
}

impl Conjugate {
    pub fn new() -> Self {
        let g = 3;
        let groups = vec![0, 0, 1, 2, 2, 2, 1];
        let y = vec![0.5, 0.9, -0.3, 1.4, 1.1, 0.7, -0.6];
        let rows = groups
            .iter()
            .zip(&y)
            .map(|(&k, &v)| ObsRow {
                response: Response::Gaussian(v),
                block: None,
                local: [0.0, 0.0],
                global: vec![(k, 1.0)],
            })
            .collect();
        let pattern = LgmPattern::new(0, g, rows, ConstraintSet::empty(g)).unwrap();
        Self { pattern, y, groups, g }
    }

    pub fn exact_log_evidence(&self, theta: &[f64]) -> f64 {
        let (ty, tx) = (theta[0].exp(), theta[1].exp());
        let n = self.y.len();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let mut c = if self.groups[i] == self.groups[j] { 1.0 / tx } else { 0.0 };
            if i == j {
                c += 1.0 / ty;
            }
            c
        });
        let chol = cov.clone().cholesky().unwrap();
        let y = DVector::from_column_slice(&self.y);
        let quad = y.dot(&chol.solve(&y));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * quad
    }
}

impl LatentModel for Conjugate {
    fn pattern(&self) -> &LgmPattern {
        &self.pattern
    }
    fn hyper_names(&self) -> Vec<String> {
        vec!["tau_y".into(), "tau_x".into()]
    }
    fn instance(&self, theta: &[f64]) -> Result<LgmInstance> {
        let tx = theta[1].exp();
        Ok(LgmInstance {
            local_prior: Matrix2::identity(),
            global_prior: DMatrix::from_diagonal_element(self.g, self.g, tx),
            gaussian_precision: theta[0].exp(),
            bernoulli_local_scale: 0.0,
            log_prior_norm: -0.5 * self.g as f64 * LN_2PI + 0.5 * self.g as f64 * tx.ln(),
        })
    }
    fn log_hyper_prior(&self, theta: &[f64]) -> f64 {
        -0.5 * (theta[0] * theta[0] + theta[1] * theta[1])
    }
    fn initial_theta(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn hyper_to_user(&self, _k: usize, x: f64) -> f64 {
        x.exp()
    }
}


//! Laplace approximation of latent Gaussian models: constrained Gaussian
//! approximations, the hyperparameter posterior, grid/CCD integration and
//! mixture summaries.

use std::cell::RefCell;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, StjmError};
use crate::lgm::{row_derivatives, ConstrainedFactor, LatentModel, LgmInstance, LgmPattern};
use crate::optim::{nelder_mead, numeric_hessian, NelderMeadOptions};
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Axis offsets (internal scale) probed around the optimiser's end point.
const MODE_PROBE_DISTANCES: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0];
/// Improvement in log posterior needed to restart from a probe.
const MODE_PROBE_GAIN: f64 = 0.5;
const MODE_SEARCH_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Converged when `max |Δμ|` falls below this.
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 50,
            max_halvings: 10,
        }
    }
}

/// Constrained Gaussian approximation of `p(μ | θ, D)` at its mode.
#[derive(Debug, Clone)]
pub struct GaussApprox {
    /// Internal-scale hyperparameters.
    pub theta: Vec<f64>,
    pub instance: LgmInstance,
    pub mode: DVector<f64>,
    /// Working weights of every observation row at the mode.
    pub weights: Vec<f64>,
    pub factor: ConstrainedFactor,
    pub log_likelihood: f64,
    pub log_prior: f64,
    /// Laplace estimate of `log p(D, θ)` (hyper-prior included).
    pub log_marginal: f64,
    /// Newton updates larger than the tolerance.
    pub iterations: usize,
}

impl GaussApprox {
    /// Log-density of the approximation at its own mode.
    pub fn log_density_at_mode(&self, pattern: &LgmPattern) -> f64 {
        self.factor.log_density_from_quad(pattern.dim(), 0.0) - 0.5 * pattern.log_det_aat()
    }

    /// Log-density at a constraint-satisfying `x`.
    pub fn log_density(&self, pattern: &LgmPattern, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mode;
        let quad = crate::lgm::posterior_quad(pattern, &self.instance, &self.weights, diff.as_slice());
        self.factor.log_density_from_quad(pattern.dim(), quad) - 0.5 * pattern.log_det_aat()
    }

    pub fn sample<R: Rng + ?Sized>(&self, pattern: &LgmPattern, rng: &mut R) -> DVector<f64> {
        let z: Vec<f64> = (0..pattern.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.factor.sample(pattern, &self.mode, &z)
    }

    pub fn marginal_variances(&self, pattern: &LgmPattern) -> Vec<f64> {
        self.factor.marginal_variances(pattern)
    }
}

/// `(gradient, working weight)` of every row at linear predictors `eta`.
fn working_quantities(pattern: &LgmPattern, inst: &LgmInstance, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    pattern
        .rows()
        .iter()
        .zip(eta)
        .map(|(r, &e)| row_derivatives(r.response, e, inst.gaussian_precision))
        .unzip()
}

/// Newton iterations for the mode of `log p(D|μ,θ) + log p(μ|θ)` under the
/// model's linear constraints, starting from `start` (or zero).
pub fn gaussian_approximation<M: LatentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    start: Option<&DVector<f64>>,
    opts: &NewtonOptions,
) -> Result<GaussApprox> {
    let pattern = model.pattern();
    let inst = model.instance(theta)?;
    let n = pattern.dim();
    let objective = |x: &DVector<f64>| -> (f64, f64) {
        let ll = pattern.log_likelihood(&inst, x.as_slice());
        let lp = pattern.log_prior(&inst, x.as_slice());
        (ll, lp)
    };
    let mut x = match start {
        Some(s) if s.len() == n => s.clone(),
        _ => DVector::zeros(n),
    };
    let mut eta = pattern.linear_predictors(&inst, x.as_slice());
    let (mut grad, mut weights) = working_quantities(pattern, &inst, &eta);
    let mut cf = ConstrainedFactor::new(pattern, pattern.factor(&inst, &weights)?)?;
    if !pattern.constraints().is_empty() {
        cf.constrain(pattern, &mut x);
        eta = pattern.linear_predictors(&inst, x.as_slice());
        (grad, weights) = working_quantities(pattern, &inst, &eta);
        cf = ConstrainedFactor::new(pattern, pattern.factor(&inst, &weights)?)?;
    }
    let (mut ll, mut lp) = objective(&x);
    let mut trace = Vec::new();
    let mut effective = 0;
    let mut converged = false;
    for _ in 0..opts.max_iterations {
        let rhs: Vec<f64> = grad.iter().zip(&weights).zip(&eta).map(|((g, w), e)| g + w * e).collect();
        let b = pattern.transpose_apply(&inst, &rhs);
        let target = cf.solve_constrained(pattern, &b);
        let mut step = &target - &x;
        let mut cand = target;
        let (mut cll, mut clp) = objective(&cand);
        let f_cur = ll + lp;
        let mut halvings = 0;
        while !(cll + clp >= f_cur - 1e-10 * f_cur.abs().max(1.0)) && halvings < opts.max_halvings {
            step *= 0.5;
            cand = &x + &step;
            (cll, clp) = objective(&cand);
            halvings += 1;
        }
        let size = step.amax();
        trace.push(size);
        x = cand;
        ll = cll;
        lp = clp;
        eta = pattern.linear_predictors(&inst, x.as_slice());
        (grad, weights) = working_quantities(pattern, &inst, &eta);
        cf = ConstrainedFactor::new(pattern, pattern.factor(&inst, &weights)?)?;
        if size < opts.tol {
            converged = true;
            break;
        }
        effective += 1;
    }
    if !converged {
        return Err(StjmError::NonConvergence {
            iterations: trace.len(),
            last_step: trace.last().copied().unwrap_or(f64::NAN),
            trace,
        });
    }
    let k = pattern.constraints().len();
    let log_pg = -0.5 * (n - k) as f64 * LN_2PI + 0.5 * cf.factor.log_det() + 0.5 * cf.log_det_w()
        - 0.5 * pattern.log_det_aat();
    let log_marginal = model.log_hyper_prior(theta) + lp + ll - log_pg;
    Ok(GaussApprox {
        theta: theta.to_vec(),
        instance: inst,
        mode: x,
        weights,
        factor: cf,
        log_likelihood: ll,
        log_prior: lp,
        log_marginal,
        iterations: effective,
    })
}

/// Unnormalised `log p(θ | D)` on the internal scale.
pub fn log_posterior_hyper<M: LatentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<f64> {
    Ok(gaussian_approximation(model, theta, None, &NewtonOptions::default())?.log_marginal)
}

/// How the hyperparameter posterior is explored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridStrategy {
    /// `grid` for at most four hyperparameters, `ccd` otherwise.
    Auto,
    Grid,
    Ccd,
    /// Only the mode (empirical Bayes).
    Eb,
}

impl std::str::FromStr for GridStrategy {
    type Err = StjmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "grid" => Ok(Self::Grid),
            "ccd" => Ok(Self::Ccd),
            "eb" => Ok(Self::Eb),
            other => Err(StjmError::Config(format!("unknown grid strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub strategy: GridStrategy,
    /// Grid step in marginal posterior standard deviations.
    pub step: f64,
    /// Grid points are kept while `log p(θ*|D) − log p(θ|D)` stays below this.
    pub max_drop: f64,
    pub ccd_f0: f64,
    /// Finite-difference step for the Hessian on the internal scale.
    pub hessian_step: f64,
    pub max_grid_points: usize,
    pub newton: NewtonOptions,
    pub optimiser_step: f64,
    pub optimiser_max_evaluations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            strategy: GridStrategy::Auto,
            step: 1.0,
            max_drop: 2.5,
            ccd_f0: 1.1,
            hessian_step: 0.01,
            max_grid_points: 5000,
            newton: NewtonOptions::default(),
            optimiser_step: 0.5,
            optimiser_max_evaluations: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Internal-scale hyperparameters.
    pub theta: Vec<f64>,
    pub delta: f64,
    pub log_post: f64,
    /// Normalised `p̂(θ_w|D) Δ_w`.
    pub weight: f64,
    pub mode: Vec<f64>,
    pub marginal_var: Vec<f64>,
}

/// Posterior summary of one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub strategy: GridStrategy,
    pub hyper_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    /// Inverse of the negative Hessian of `log p(θ|D)` at the mode.
    pub theta_covariance: Vec<Vec<f64>>,
    pub log_post_mode: f64,
    pub grid: Vec<GridPoint>,
    pub hyper: Vec<ParamSummary>,
    pub latent: Vec<ParamSummary>,
    pub evaluations: usize,
}

impl FitResult {
    pub fn weights(&self) -> Vec<f64> {
        self.grid.iter().map(|g| g.weight).collect()
    }

    /// Index of the grid point at the hyperparameter mode.
    pub fn mode_index(&self) -> usize {
        self.grid
            .iter()
            .position(|g| g.theta == self.theta_mode)
            .unwrap_or(0)
    }

    pub fn latent_summary(&self, name: &str) -> Option<&ParamSummary> {
        self.latent.iter().find(|s| s.name == name)
    }

    pub fn hyper_summary(&self, name: &str) -> Option<&ParamSummary> {
        self.hyper.iter().find(|s| s.name == name)
    }

    /// Rebuilds the Gaussian approximation of every grid point from its stored mode.
    pub fn approximations<M: LatentModel + ?Sized>(&self, model: &M) -> Result<Vec<GaussApprox>> {
        self.grid
            .par_iter()
            .map(|g| {
                let start = DVector::from_column_slice(&g.mode);
                gaussian_approximation(model, &g.theta, Some(&start), &NewtonOptions::default())
            })
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Fractional-factorial generators (resolution ≥ V) for up to 8 factors.
/// Each generated column is the product of the listed base columns.
fn factorial_design(m: usize) -> Result<Vec<Vec<f64>>> {
    let (base, generated): (usize, Vec<Vec<usize>>) = match m {
        0 | 1 => return Ok(Vec::new()),
        2..=4 => (m, vec![]),
        5 => (4, vec![vec![0, 1, 2, 3]]),
        6 => (5, vec![vec![0, 1, 2, 3, 4]]),
        7 => (6, vec![vec![0, 1, 2, 3, 4, 5]]),
        8 => (6, vec![vec![0, 1, 2, 3], vec![0, 1, 4, 5]]),
        _ => {
            return Err(StjmError::Optimisation(format!(
                "central composite design supports at most 8 hyperparameters, got {m}"
            )))
        }
    };
    let mut out = Vec::with_capacity(1 << base);
    for bits in 0..(1usize << base) {
        let mut row: Vec<f64> = (0..base).map(|k| if bits >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
        for g in &generated {
            let v = g.iter().map(|&k| row[k]).product();
            row.push(v);
        }
        out.push(row);
    }
    Ok(out)
}

/// Central composite design in standardised coordinates with integration weights.
pub fn ccd_points(m: usize, f0: f64) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut pts = vec![vec![0.0; m]];
    let radius = f0 * (m as f64).sqrt();
    for k in 0..m {
        for sign in [1.0, -1.0] {
            let mut z = vec![0.0; m];
            z[k] = sign * radius;
            pts.push(z);
        }
    }
    for row in factorial_design(m)? {
        pts.push(row.into_iter().map(|x| x * f0).collect());
    }
    let np = pts.len() as f64;
    let mf = m as f64;
    let w = 1.0 / ((np - 1.0) * (f0 * f0 - 1.0) * (1.0 + (-mf * f0 * f0 / 2.0).exp()));
    Ok(pts
        .into_iter()
        .enumerate()
        .map(|(k, z)| (z, if k == 0 { 1.0 } else { w }))
        .collect())
}

/// Mixture of univariate Gaussians: mean, sd and quantiles.
pub fn mixture_summary(name: &str, weights: &[f64], means: &[f64], vars: &[f64]) -> ParamSummary {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights.iter().zip(means).zip(vars).map(|((w, m), v)| w * (v + m * m)).sum();
    let sd = (second - mean * mean).max(0.0).sqrt();
    let quantile = |p: f64| -> f64 {
        if sd == 0.0 {
            return mean;
        }
        let cdf = |x: f64| -> f64 {
            weights
                .iter()
                .zip(means)
                .zip(vars)
                .map(|((w, m), v)| {
                    if *v <= 0.0 {
                        if x >= *m {
                            *w
                        } else {
                            0.0
                        }
                    } else {
                        w * Normal::new(*m, v.sqrt()).expect("positive sd").cdf(x)
                    }
                })
                .sum()
        };
        let mut lo = mean - 10.0 * sd;
        let mut hi = mean + 10.0 * sd;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    ParamSummary {
        name: name.to_string(),
        mean,
        sd,
        q025: quantile(0.025),
        q50: quantile(0.5),
        q975: quantile(0.975),
    }
}

/// Summary of `g(X)` for `X ~ N(m, s²)` with monotone increasing `g`.
fn transformed_normal_summary(name: &str, m: f64, s: f64, g: impl Fn(f64) -> f64) -> ParamSummary {
    let rule = GaussHermite::new(40);
    let norm = std::f64::consts::PI.sqrt();
    let (mut e1, mut e2) = (0.0, 0.0);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = g(m + std::f64::consts::SQRT_2 * s * x);
        e1 += w * v / norm;
        e2 += w * v * v / norm;
    }
    ParamSummary {
        name: name.to_string(),
        mean: e1,
        sd: (e2 - e1 * e1).max(0.0).sqrt(),
        q025: g(m - 1.959_963_984_540_054 * s),
        q50: g(m),
        q975: g(m + 1.959_963_984_540_054 * s),
    }
}

/// Negative-Hessian-based covariance with eigenvalues floored so that every
/// direction has a finite spread.
fn regularised_covariance(neg_hess: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(neg_hess.clone());
    let floor = 1e-3;
    let mut clipped = false;
    let vals = eig.eigenvalues.map(|l| {
        if l < floor {
            clipped = true;
            floor
        } else {
            l
        }
    });
    let v = &eig.eigenvectors;
    let cov = v * DMatrix::from_diagonal(&vals.map(|l| 1.0 / l)) * v.transpose();
    // θ(z) = θ* + V Λ^{-1/2} z
    let to_theta = v * DMatrix::from_diagonal(&vals.map(|l| 1.0 / l.sqrt()));
    (cov, to_theta, clipped)
}

/// Maximises the hyperparameter posterior, builds the integration grid and
/// summarises every latent coordinate and hyperparameter.
pub fn fit<M: LatentModel + ?Sized>(model: &M, opts: &FitOptions) -> Result<FitResult> {
    let names = model.hyper_names();
    let m = names.len();
    let strategy = match opts.strategy {
        GridStrategy::Auto if m <= 4 => GridStrategy::Grid,
        GridStrategy::Auto => GridStrategy::Ccd,
        s => s,
    };
    let warm: RefCell<Option<DVector<f64>>> = RefCell::new(None);
    let evaluations = RefCell::new(0usize);
    let neg_log_post = |theta: &[f64]| -> f64 {
        *evaluations.borrow_mut() += 1;
        let start = warm.borrow().clone();
        match gaussian_approximation(model, theta, start.as_ref(), &opts.newton) {
            Ok(ga) if ga.log_marginal.is_finite() => {
                *warm.borrow_mut() = Some(ga.mode.clone());
                -ga.log_marginal
            }
            Ok(_) => f64::INFINITY,
            Err(e) => {
                debug!("log posterior unavailable at {theta:?}: {e}");
                f64::INFINITY
            }
        }
    };

    let theta0 = model.initial_theta();
    if !neg_log_post(&theta0).is_finite() {
        return Err(StjmError::Optimisation(format!(
            "hyperparameter posterior not finite at the starting point {theta0:?}"
        )));
    }
    let nm = NelderMeadOptions {
        initial_step: opts.optimiser_step,
        max_evaluations: opts.optimiser_max_evaluations,
        ..NelderMeadOptions::default()
    };
    let mut res = nelder_mead(neg_log_post, &theta0, &nm);
    if !res.value.is_finite() {
        return Err(StjmError::Optimisation("optimiser found no finite posterior value".into()));
    }
    // Weakly identified precisions can leave a local mode next to a higher
    // plateau further out; probe each axis and restart from any better point.
    for _ in 0..MODE_SEARCH_ROUNDS {
        let mut probe: Option<(Vec<f64>, f64)> = None;
        for k in 0..m {
            for sign in [-1.0, 1.0] {
                for d in MODE_PROBE_DISTANCES {
                    let mut cand = res.x.clone();
                    cand[k] += sign * d;
                    let v = neg_log_post(&cand);
                    if v < res.value - MODE_PROBE_GAIN && probe.as_ref().is_none_or(|p| v < p.1) {
                        probe = Some((cand, v));
                    }
                }
            }
        }
        let Some((start, v)) = probe else { break };
        info!("better hyperparameter region at {start:?} (log posterior {:.4}); restarting", -v);
        let next = nelder_mead(neg_log_post, &start, &nm);
        if next.value < res.value {
            res = next;
        } else {
            break;
        }
    }
    if !res.converged {
        warn!("hyperparameter optimiser stopped after {} evaluations without converging", res.evaluations);
    }
    let mut theta_star = res.x;
    let mut f_star = res.value;
    info!("hyperparameter mode {:?} (log posterior {:.4})", theta_star, -f_star);

    let h = vec![opts.hessian_step; m];
    let mut neg_hess = DMatrix::zeros(m, m);
    if m > 0 {
        // One Newton correction of the optimiser's end point.
        for pass in 0..2 {
            let hs = numeric_hessian(neg_log_post, &theta_star, f_star, &h);
            neg_hess = DMatrix::from_fn(m, m, |i, j| hs[i][j]);
            if pass == 1 {
                break;
            }
            let grad = DVector::from_fn(m, |k, _| {
                let mut a = theta_star.clone();
                let mut b = theta_star.clone();
                a[k] += h[k];
                b[k] -= h[k];
                (neg_log_post(&a) - neg_log_post(&b)) / (2.0 * h[k])
            });
            let (cov, _, _) = regularised_covariance(&neg_hess);
            let delta = -(&cov * grad);
            if delta.amax() < 1e-4 {
                break;
            }
            let cand: Vec<f64> = theta_star.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let fc = neg_log_post(&cand);
            if fc < f_star {
                theta_star = cand;
                f_star = fc;
            } else {
                break;
            }
        }
    }
    let (cov, to_theta, clipped) = regularised_covariance(&neg_hess);
    if clipped {
        warn!("hyperparameter Hessian not negative definite at the mode; flat directions were regularised");
    }

    // Candidate points with their volumes.
    let lp_star = -f_star;
    let mut points: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    match strategy {
        GridStrategy::Eb | GridStrategy::Auto => points.push((theta_star.clone(), 1.0, lp_star)),
        GridStrategy::Ccd => {
            let design = ccd_points(m, opts.ccd_f0)?;
            let thetas: Vec<(Vec<f64>, f64)> = design
                .into_iter()
                .map(|(z, w)| {
                    let zv = DVector::from_vec(z);
                    let off = &to_theta * zv;
                    (theta_star.iter().zip(off.iter()).map(|(a, b)| a + b).collect(), w)
                })
                .collect();
            for (k, (t, w)) in thetas.into_iter().enumerate() {
                let lp = if k == 0 { lp_star } else { -neg_log_post(&t) };
                if lp.is_finite() {
                    points.push((t, w, lp));
                }
            }
        }
        GridStrategy::Grid => {
            let sd: Vec<f64> = (0..m).map(|k| cov[(k, k)].sqrt() * opts.step).collect();
            let mut seen = std::collections::BTreeSet::new();
            let mut queue = std::collections::VecDeque::new();
            let origin = vec![0i32; m];
            seen.insert(origin.clone());
            queue.push_back(origin);
            while let Some(idx) = queue.pop_front() {
                if points.len() >= opts.max_grid_points {
                    warn!("grid truncated at {} points", opts.max_grid_points);
                    break;
                }
                let t: Vec<f64> = (0..m).map(|k| theta_star[k] + idx[k] as f64 * sd[k]).collect();
                let lp = if idx.iter().all(|&k| k == 0) { lp_star } else { -neg_log_post(&t) };
                if !(lp.is_finite() && lp_star - lp < opts.max_drop) {
                    continue;
                }
                points.push((t, 1.0, lp));
                for k in 0..m {
                    for d in [-1, 1] {
                        let mut nb = idx.clone();
                        nb[k] += d;
                        if seen.insert(nb.clone()) {
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
    }
    if points.is_empty() {
        return Err(StjmError::Optimisation("integration grid is empty".into()));
    }
    let lp_max = points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = points.iter().map(|(_, d, lp)| d * (lp - lp_max).exp()).collect();
    let total: f64 = raw.iter().sum();
    info!("{} grid points ({:?})", points.len(), strategy);

    let start = warm.borrow().clone();
    let approx: Vec<Result<(Vec<f64>, Vec<f64>)>> = points
        .par_iter()
        .map(|(t, _, _)| {
            let ga = gaussian_approximation(model, t, start.as_ref(), &opts.newton)?;
            let var = ga.marginal_variances(model.pattern());
            Ok((ga.mode.as_slice().to_vec(), var))
        })
        .collect();
    let mut grid = Vec::with_capacity(points.len());
    for ((p, r), a) in points.into_iter().zip(raw).zip(approx) {
        let (mode, var) = a?;
        grid.push(GridPoint {
            theta: p.0,
            delta: p.1,
            log_post: p.2,
            weight: r / total,
            mode,
            marginal_var: var,
        });
    }
    let weights: Vec<f64> = grid.iter().map(|g| g.weight).collect();

    let latent_names = model.latent_names();
    let latent = (0..model.pattern().dim())
        .into_par_iter()
        .map(|k| {
            let means: Vec<f64> = grid.iter().map(|g| g.mode[k]).collect();
            let vars: Vec<f64> = grid.iter().map(|g| g.marginal_var[k]).collect();
            mixture_summary(&latent_names[k], &weights, &means, &vars)
        })
        .collect();
    let hyper = (0..m)
        .map(|k| {
            let mean_int: f64 = grid.iter().map(|g| g.weight * g.theta[k]).sum();
            let s = cov[(k, k)].sqrt();
            transformed_normal_summary(&names[k], mean_int, s, |x| model.hyper_to_user(k, x))
        })
        .collect();
    let evaluations = *evaluations.borrow();
    Ok(FitResult {
        strategy,
        hyper_names: names,
        theta_mode: theta_star,
        theta_covariance: (0..m).map(|i| (0..m).map(|j| cov[(i, j)]).collect()).collect(),
        log_post_mode: lp_star,
        grid,
        hyper,
        latent,
        evaluations,
    })
}

/// Draws `r` latent vectors: a grid point by weight, then a constrained
/// Gaussian draw at that point. Returns `(grid index, draw)` pairs.
pub fn sample_latent(
    approximations: &[GaussApprox],
    pattern: &LgmPattern,
    weights: &[f64],
    r: usize,
    seed: u64,
) -> Result<Vec<(usize, DVector<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(weights).map_err(|e| StjmError::Optimisation(format!("grid weights: {e}")))?;
    Ok((0..r)
        .map(|_| {
            let w = pick.sample(&mut rng);
            (w, approximations[w].sample(pattern, &mut rng))
        })
        .collect())
}

/// `r` draws at every grid point; stream `w` of the seed feeds point `w`.
pub fn sample_latent_stratified(
    approximations: &[GaussApprox],
    pattern: &LgmPattern,
    r: usize,
    seed: u64,
) -> Vec<Vec<DVector<f64>>> {
    approximations
        .par_iter()
        .enumerate()
        .map(|(w, ga)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(w as u64);
            (0..r).map(|_| ga.sample(pattern, &mut rng)).collect()
        })
        .collect()
}

/// Writes summaries as CSV with columns `name,mean,sd,q2.5,q50,q97.5`.
pub fn write_summary_csv<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = &'a ParamSummary>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "mean", "sd", "q2.5", "q50", "q97.5"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.sd),
            format!("{:.6}", r.q025),
            format!("{:.6}", r.q50),
            format!("{:.6}", r.q975),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::Conjugate;

    #[test]
    fn laplace_evidence_is_exact_for_conjugate_gaussian() {
        let m = Conjugate::new();
        for theta in [[0.0, 0.0], [1.3, -0.4], [-0.7, 2.0]] {
            let ga = gaussian_approximation(&m, &theta, None, &NewtonOptions::default()).unwrap();
            let expect = m.exact_log_evidence(&theta) + m.log_hyper_prior(&theta);
            assert!((ga.log_marginal - expect).abs() < 1e-9, "{} vs {}", ga.log_marginal, expect);
            assert_eq!(ga.iterations, 1);
        }
    }

    #[test]
    fn eb_fit_has_single_unit_weight_and_grid_contains_mode() {
        let m = Conjugate::new();
        let eb = fit(
            &m,
            &FitOptions {
                strategy: GridStrategy::Eb,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(eb.grid.len(), 1);
        assert_eq!(eb.grid[0].weight, 1.0);
        let g = fit(
            &m,
            &FitOptions {
                strategy: GridStrategy::Grid,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.grid.iter().any(|p| p.theta == g.theta_mode));
        assert!(g.grid.len() > 5);
        let c = fit(
            &m,
            &FitOptions {
                strategy: GridStrategy::Ccd,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(c.grid.len(), 1 + 4 + 4);
    }

    #[test]
    fn ccd_design_sizes_and_balance() {
        for (m, n) in [(1, 3), (2, 9), (5, 27), (6, 45), (7, 79), (8, 81)] {
            let pts = ccd_points(m, 1.1).unwrap();
            assert_eq!(pts.len(), n, "m = {m}");
            for k in 0..m {
                let s: f64 = pts.iter().map(|(z, _)| z[k]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
        assert!(ccd_points(9, 1.1).is_err());
    }

    #[test]
    fn mixture_of_one_gaussian_has_normal_quantiles() {
        let s = mixture_summary("x", &[1.0], &[2.0], &[4.0]);
        assert!((s.q975 - (2.0 + 2.0 * 1.959_963_984_540_054)).abs() < 1e-9);
        assert!((s.q50 - 2.0).abs() < 1e-9);
        assert!((s.sd - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_samples_are_deterministic() {
        let m = Conjugate::new();
        let ga = gaussian_approximation(&m, &[0.0, 0.0], None, &NewtonOptions::default()).unwrap();
        let a = sample_latent_stratified(std::slice::from_ref(&ga), m.pattern(), 3, 9);
        let b = sample_latent_stratified(std::slice::from_ref(&ga), m.pattern(), 3, 9);
        assert_eq!(a, b);
    }
}

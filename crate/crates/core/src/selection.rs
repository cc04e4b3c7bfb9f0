//! Cross-validated dynamic conditional likelihood (cvDCL) from a Laplace fit
//! or an MCMC chain, with Monte Carlo standard errors and per-area
//! decomposition.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StjmError};
use crate::laplace::{gaussian_approximation, FitResult, NewtonOptions};
use crate::lgm::bernoulli_log_pmf;
use crate::mcmc::ChainResult;
use crate::model::{HyperParams, ModelDefinition};
use crate::quadrature::{adaptive_gh_2d, log_sum_exp, GaussHermite};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Nodes per axis of the quadrature oracle.
pub const QUADRATURE_NODES: usize = 30;

/// How the integral over `Uᵢ` inside `hᵢ` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HMethod {
    Laplace,
    Eb,
    Quadrature,
}

impl HMethod {
    /// Report tag of the INLA estimator using this method.
    pub fn tag(self) -> &'static str {
        match self {
            HMethod::Laplace => "inla-laplace",
            HMethod::Eb => "inla-eb",
            HMethod::Quadrature => "quadrature-oracle",
        }
    }
}

impl std::str::FromStr for HMethod {
    type Err = StjmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(Self::Laplace),
            "eb" => Ok(Self::Eb),
            "quadrature" => Ok(Self::Quadrature),
            other => Err(StjmError::Config(format!("unknown h method `{other}`"))),
        }
    }
}

fn check_at_risk(model: &ModelDefinition, i: usize, t: usize) -> Result<()> {
    let loan = model
        .dataset
        .loans
        .get(i)
        .ok_or_else(|| StjmError::Model(format!("loan index {i} out of range")))?;
    if loan.duration() <= t {
        return Err(StjmError::NotAtRisk { loan: i, t });
    }
    Ok(())
}

/// `ν₀ + zᵢᵀβ₂ + v_s + u_a + δ_{a,s}` for `s = 1..=upto`, read from a full latent vector.
pub fn survival_offsets(model: &ModelDefinition, mu: &[f64], i: usize, upto: usize) -> Vec<f64> {
    let l = &model.layout;
    let loan = &model.dataset.loans[i];
    let fixed: f64 = mu[l.nu0()]
        + model
            .covariates_of(i)
            .iter()
            .enumerate()
            .map(|(k, z)| z * mu[l.beta2(k)])
            .sum::<f64>()
        + l.u_area(loan.area).map_or(0.0, |k| mu[k]);
    (1..=upto)
        .map(|s| fixed + mu[l.v(s)] + l.delta(loan.area, s).map_or(0.0, |k| mu[k]))
        .collect()
}

/// `log p(T_i, δ_i | T_i > t, U_i, μ, θ)`: the Bernoulli log-likelihood of
/// periods `t+1..=t_i`.
pub fn conditional_event_loglik(
    model: &ModelDefinition,
    hyper: &HyperParams,
    mu: &[f64],
    u: [f64; 2],
    i: usize,
    t: usize,
) -> Result<f64> {
    check_at_risk(model, i, t)?;
    let loan = &model.dataset.loans[i];
    let off = survival_offsets(model, mu, i, loan.duration());
    Ok(event_loglik(&off, loan.prepaid, hyper.lambda, u, t))
}

fn event_loglik(off: &[f64], prepaid: bool, lambda: f64, u: [f64; 2], t: usize) -> f64 {
    let ti = off.len();
    (t + 1..=ti)
        .map(|s| {
            let eta = off[s - 1] + lambda * (u[0] + u[1] * s as f64);
            bernoulli_log_pmf(prepaid && s == ti, eta)
        })
        .sum()
}

/// Value, gradient and Hessian of a log-density in `Uᵢ`.
#[derive(Debug, Clone, Copy)]
struct Taylor2 {
    val: f64,
    grad: Vector2<f64>,
    hess: Matrix2<f64>,
}

impl Taylor2 {
    fn zero() -> Self {
        Self {
            val: 0.0,
            grad: Vector2::zeros(),
            hess: Matrix2::zeros(),
        }
    }

    fn add_bernoulli(&mut self, x: bool, eta: f64, dir: Vector2<f64>) {
        let p = crate::lgm::logistic(eta);
        self.val += bernoulli_log_pmf(x, eta);
        self.grad += dir * (f64::from(u8::from(x)) - p);
        self.hess -= dir * dir.transpose() * (p * (1.0 - p));
    }

    fn minus(self, o: &Taylor2) -> Self {
        Self {
            val: self.val - o.val,
            grad: self.grad - o.grad,
            hess: self.hess - o.hess,
        }
    }
}

/// The two-dimensional integrand of `hᵢ` for one loan, one `θ` and one draw
/// of the other latent effects.
#[derive(Debug, Clone, PartialEq)]
pub struct HProblem {
    pub q_u: Matrix2<f64>,
    pub tau_y: f64,
    pub lambda: f64,
    /// `y_{i,s} − β₀₁ − β₁₁ s` for `s = 1..=t`.
    pub resid: Vec<f64>,
    /// Survival offsets for `s = 1..=t_i`.
    pub offsets: Vec<f64>,
    pub prepaid: bool,
    pub t: usize,
}

impl HProblem {
    fn dir(&self, s: usize) -> Vector2<f64> {
        Vector2::new(self.lambda, self.lambda * s as f64)
    }

    /// Log of prior × longitudinal likelihood × survival to `t`.
    fn log_f(&self, u: Vector2<f64>) -> Taylor2 {
        let mut q = Taylor2::zero();
        let det = self.q_u.determinant();
        q.val = -LN_2PI + 0.5 * det.ln() - 0.5 * u.dot(&(self.q_u * u));
        q.grad = -(self.q_u * u);
        q.hess = -self.q_u;
        let half_log_tau = 0.5 * (self.tau_y.ln() - LN_2PI);
        for (k, r) in self.resid.iter().enumerate() {
            let s = (k + 1) as f64;
            let e = r - u[0] - u[1] * s;
            let d = Vector2::new(1.0, s);
            q.val += half_log_tau - 0.5 * self.tau_y * e * e;
            q.grad += d * (self.tau_y * e);
            q.hess -= d * d.transpose() * self.tau_y;
        }
        for s in 1..=self.t {
            let dir = self.dir(s);
            q.add_bernoulli(false, self.offsets[s - 1] + dir.dot(&u), dir);
        }
        q
    }

    /// Log of `p(T_i, δ_i | T_i > t, Uᵢ, …)`.
    fn log_g(&self, u: Vector2<f64>) -> Taylor2 {
        let mut q = Taylor2::zero();
        let ti = self.offsets.len();
        for s in self.t + 1..=ti {
            let dir = self.dir(s);
            q.add_bernoulli(self.prepaid && s == ti, self.offsets[s - 1] + dir.dot(&u), dir);
        }
        q
    }

    fn log_num(&self, u: Vector2<f64>) -> Taylor2 {
        self.log_f(u).minus(&self.log_g(u))
    }
}

/// Newton ascent on a 2-D log-density; fails when the negative Hessian is not
/// positive definite along the path.
fn maximise(phi: impl Fn(Vector2<f64>) -> Taylor2, start: Vector2<f64>) -> Option<(Vector2<f64>, Taylor2)> {
    let mut u = start;
    let mut q = phi(u);
    for _ in 0..100 {
        let neg = -q.hess;
        let chol = neg.cholesky()?;
        let mut step = chol.solve(&q.grad);
        let mut cand = u + step;
        let mut qc = phi(cand);
        let mut halvings = 0;
        while !(qc.val >= q.val - 1e-12 * q.val.abs().max(1.0)) && halvings < 30 {
            step *= 0.5;
            cand = u + step;
            qc = phi(cand);
            halvings += 1;
        }
        u = cand;
        q = qc;
        if step.amax() < 1e-10 {
            (-q.hess).cholesky()?;
            return Some((u, q));
        }
    }
    None
}

fn lower_cholesky_of_inverse(neg_hess: &Matrix2<f64>) -> Option<[[f64; 2]; 2]> {
    let cov = neg_hess.try_inverse()?;
    let l = cov.cholesky()?.l();
    Some([[l[(0, 0)], 0.0], [l[(1, 0)], l[(1, 1)]]])
}

/// Result of one `log hᵢ` evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HValue {
    pub log_h: f64,
    /// Mode of the numerator density, usable as a warm start.
    pub mode: [f64; 2],
    /// The Laplace method fell back to quadrature.
    pub fallback: bool,
}

/// `log hᵢ` by the requested method. `start` seeds the mode search.
pub fn log_h(problem: &HProblem, method: HMethod, start: [f64; 2]) -> Result<HValue> {
    let start = Vector2::new(start[0], start[1]);
    let (uf, qf) = maximise(|u| problem.log_f(u), start)
        .or_else(|| maximise(|u| problem.log_f(u), Vector2::zeros()))
        .ok_or_else(|| StjmError::Optimisation("no mode for the conditional density of U_i".into()))?;
    let mode = [uf[0], uf[1]];
    match method {
        HMethod::Eb => Ok(HValue {
            log_h: -problem.log_g(uf).val,
            mode,
            fallback: false,
        }),
        HMethod::Laplace => match maximise(|u| problem.log_num(u), uf) {
            Some((_, qn)) => {
                let log_h = qn.val - qf.val + 0.5 * ((-qf.hess).determinant().ln() - (-qn.hess).determinant().ln());
                Ok(HValue {
                    log_h,
                    mode,
                    fallback: false,
                })
            }
            None => {
                warn!("h_i integrand not log-concave at its mode; using quadrature");
                let log_h = quadrature_log_h(problem, uf, &qf)?;
                Ok(HValue {
                    log_h,
                    mode,
                    fallback: true,
                })
            }
        },
        HMethod::Quadrature => Ok(HValue {
            log_h: quadrature_log_h(problem, uf, &qf)?,
            mode,
            fallback: false,
        }),
    }
}

fn quadrature_log_h(problem: &HProblem, uf: Vector2<f64>, qf: &Taylor2) -> Result<f64> {
    let rule = GaussHermite::new(QUADRATURE_NODES);
    let lf = lower_cholesky_of_inverse(&-qf.hess)
        .ok_or_else(|| StjmError::NotPositiveDefinite { pivot: 0 })?;
    let den = adaptive_gh_2d(&rule, [uf[0], uf[1]], lf, |u| problem.log_f(Vector2::new(u[0], u[1])).val);
    let (centre, l) = match maximise(|u| problem.log_num(u), uf) {
        Some((un, qn)) => match lower_cholesky_of_inverse(&-qn.hess) {
            Some(l) => (un, l),
            None => (uf, lf),
        },
        None => (uf, lf),
    };
    let num = adaptive_gh_2d(&rule, [centre[0], centre[1]], l, |u| problem.log_num(Vector2::new(u[0], u[1])).val);
    Ok(num - den)
}

/// Builds the `hᵢ` problem for loan `i` from `θ` and a full latent vector.
pub fn h_problem(model: &ModelDefinition, hyper: &HyperParams, mu: &[f64], i: usize, t: usize) -> Result<HProblem> {
    check_at_risk(model, i, t)?;
    let l = &model.layout;
    let loan = &model.dataset.loans[i];
    let resid = (1..=t)
        .map(|s| loan.y[s - 1] - mu[l.beta01()] - mu[l.beta11()] * s as f64)
        .collect();
    Ok(HProblem {
        q_u: hyper.q_u()?,
        tau_y: hyper.tau_y,
        lambda: hyper.lambda,
        resid,
        offsets: survival_offsets(model, mu, i, loan.duration()),
        prepaid: loan.prepaid,
        t,
    })
}

/// `hᵢ(θ, μ_{−Uᵢ} | t)` for a full latent vector `mu` (its `Uᵢ` entries are ignored).
pub fn h_i(model: &ModelDefinition, hyper: &HyperParams, mu: &[f64], i: usize, t: usize, method: HMethod) -> Result<f64> {
    let p = h_problem(model, hyper, mu, i, t)?;
    Ok(log_h(&p, method, [0.0, 0.0])?.log_h.exp())
}

/// One evaluation time of a cvDCL estimate with its loan-level terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvdclEstimate {
    pub t: usize,
    pub n_at_risk: usize,
    pub estimate: f64,
    pub mc_se: f64,
    /// `(loan index, area, term / N_t)` for every loan at risk.
    pub loan_terms: Vec<(usize, usize, f64)>,
    /// Laplace evaluations that fell back to quadrature.
    pub fallbacks: usize,
}

/// Sum of the loan-level terms by area; the values add up to the estimate.
pub fn cvdcl_by_area(estimate: &CvdclEstimate) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for &(_, a, v) in &estimate.loan_terms {
        *out.entry(a).or_insert(0.0) += v;
    }
    out
}

/// `model − baseline` per area; areas missing on one side count as zero.
pub fn area_differences(model: &BTreeMap<usize, f64>, baseline: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let mut out: BTreeMap<usize, f64> = model.clone();
    for (a, v) in baseline {
        *out.entry(*a).or_insert(0.0) -= v;
    }
    out
}

fn at_risk_loans(model: &ModelDefinition, t: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..model.dataset.n_loans())
        .filter(|&i| model.dataset.loans[i].duration() > t)
        .collect();
    if idx.is_empty() {
        return Err(StjmError::NoneAtRisk(t));
    }
    Ok(idx)
}

fn finish(t: usize, loans: &[usize], model: &ModelDefinition, terms: Vec<f64>, mc_se: f64, fallbacks: usize) -> CvdclEstimate {
    let nt = loans.len() as f64;
    let loan_terms: Vec<(usize, usize, f64)> = loans
        .iter()
        .zip(&terms)
        .map(|(&i, v)| (i, model.dataset.loans[i].area, v / nt))
        .collect();
    CvdclEstimate {
        t,
        n_at_risk: loans.len(),
        estimate: loan_terms.iter().map(|x| x.2).sum(),
        mc_se,
        loan_terms,
        fallbacks,
    }
}

/// Per-area marginal of the global effects that enter loan predictors at one grid point.
struct AreaSampler {
    /// Global latent indices, in the order drawn.
    index: Vec<usize>,
    mean: DVector<f64>,
    /// `Σ = L Lᵀ` (symmetric square root, rank-deficient directions dropped).
    root: DMatrix<f64>,
}

impl AreaSampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, into: &mut [f64]) {
        let z = DVector::from_fn(self.root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.mean + &self.root * z;
        for (&k, v) in self.index.iter().zip(x.iter()) {
            into[k] = *v;
        }
    }
}

struct GridCache {
    hyper: HyperParams,
    weight: f64,
    areas: BTreeMap<usize, AreaSampler>,
}

/// The Laplace-based estimator: Gaussian approximations at every grid point
/// and independent draws of the global effects for every loan.
pub struct InlaSelector<'a> {
    model: &'a ModelDefinition,
    grid: Vec<GridCache>,
}

impl<'a> InlaSelector<'a> {
    pub fn new(model: &'a ModelDefinition, fit: &FitResult) -> Result<Self> {
        let pts: Vec<(Vec<f64>, f64, Option<Vec<f64>>)> = fit
            .grid
            .iter()
            .map(|g| (g.theta.clone(), g.weight, Some(g.mode.clone())))
            .collect();
        Self::from_points(model, &pts)
    }

    /// Grid given as `(θ internal, normalised weight, optional warm start)`.
    #[allow(clippy::type_complexity)]
    pub fn from_points(model: &'a ModelDefinition, points: &[(Vec<f64>, f64, Option<Vec<f64>>)]) -> Result<Self> {
        let l = &model.layout;
        let mut areas: Vec<usize> = model.dataset.loans.iter().map(|x| x.area).collect();
        areas.sort_unstable();
        areas.dedup();
        let grid = points
            .par_iter()
            .map(|(theta, weight, start)| {
                let start = start.as_ref().map(|s| DVector::from_column_slice(s));
                let ga = gaussian_approximation(model, theta, start.as_ref(), &NewtonOptions::default())?;
                let go = l.global_offset();
                let cov = ga.factor.global_covariance();
                let mut samplers = BTreeMap::new();
                for &a in &areas {
                    let mut index: Vec<usize> = (l.beta01()..=l.nu0()).collect();
                    index.extend((1..=l.t).map(|s| l.v(s)));
                    index.extend(l.u_area(a));
                    index.extend((1..=l.t).filter_map(|s| l.delta(a, s)));
                    let local: Vec<usize> = index.iter().map(|k| k - go).collect();
                    let sub = DMatrix::from_fn(local.len(), local.len(), |r, c| cov[(local[r], local[c])]);
                    let eig = SymmetricEigen::new(sub);
                    let top = eig.eigenvalues.amax();
                    let keep: Vec<usize> = (0..eig.eigenvalues.len())
                        .filter(|&k| eig.eigenvalues[k] > 1e-12 * top)
                        .collect();
                    let root = DMatrix::from_fn(local.len(), keep.len(), |r, c| {
                        eig.eigenvectors[(r, keep[c])] * eig.eigenvalues[keep[c]].sqrt()
                    });
                    let mean = DVector::from_fn(index.len(), |r, _| ga.mode[index[r]]);
                    samplers.insert(a, AreaSampler { index, mean, root });
                }
                Ok(GridCache {
                    hyper: model.hyper_from_internal(theta)?,
                    weight: *weight,
                    areas: samplers,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = grid.iter().map(|g| g.weight).sum();
        if !(total > 0.0) {
            return Err(StjmError::Optimisation("grid weights sum to zero".into()));
        }
        let grid = grid
            .into_iter()
            .map(|mut g| {
                g.weight /= total;
                g
            })
            .collect();
        Ok(Self { model, grid })
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    /// `log hᵢ` for every `(w, r)` for loan `i`, with `r` draws per grid point
    /// from stream `i` of `seed`.
    fn loan_log_h(&self, i: usize, t: usize, r: usize, method: HMethod, seed: u64) -> Result<(Vec<Vec<f64>>, usize)> {
        let model = self.model;
        let loan = &model.dataset.loans[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut mu = vec![0.0; model.dim()];
        let mut out = Vec::with_capacity(self.grid.len());
        let mut fallbacks = 0;
        let mut start = [0.0, 0.0];
        for g in &self.grid {
            let sampler = &g.areas[&loan.area];
            let mut row = Vec::with_capacity(r);
            for _ in 0..r {
                sampler.draw(&mut rng, &mut mu);
                let p = h_problem(model, &g.hyper, &mu, i, t)?;
                let v = log_h(&p, method, start)?;
                start = v.mode;
                fallbacks += usize::from(v.fallback);
                row.push(v.log_h);
            }
            out.push(row);
        }
        Ok((out, fallbacks))
    }

    /// The grid estimator with the delta-method standard error; `r` draws per
    /// grid point and loan. With `r = 1` the standard error is NaN.
    pub fn cvdcl(&self, t: usize, r: usize, method: HMethod, seed: u64) -> Result<CvdclEstimate> {
        if r == 0 {
            return Err(StjmError::Config("R must be at least 1".into()));
        }
        let loans = at_risk_loans(self.model, t)?;
        let weights: Vec<f64> = self.grid.iter().map(|g| g.weight).collect();
        let per_loan: Vec<(f64, f64, usize)> = loans
            .par_iter()
            .map(|&i| {
                let (lh, fb) = self.loan_log_h(i, t, r, method, seed)?;
                let shift = lh.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut mix = 0.0;
                let mut num = 0.0;
                for (row, w) in lh.iter().zip(&weights) {
                    let h: Vec<f64> = row.iter().map(|x| (x - shift).exp()).collect();
                    let m = h.iter().sum::<f64>() / r as f64;
                    let var = if r > 1 {
                        h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1) as f64
                    } else {
                        f64::NAN
                    };
                    mix += w * m;
                    num += var * w * w;
                }
                Ok((shift + mix.ln(), num / (mix * mix), fb))
            })
            .collect::<Result<Vec<_>>>()?;
        let nt = loans.len() as f64;
        let var = per_loan.iter().map(|x| x.1).sum::<f64>() / (nt * nt * r as f64);
        let fallbacks = per_loan.iter().map(|x| x.2).sum();
        let terms = per_loan.iter().map(|x| x.0).collect();
        Ok(finish(t, &loans, self.model, terms, var.sqrt(), fallbacks))
    }
}

/// Convenience wrapper: builds an [`InlaSelector`] and evaluates one time.
pub fn cvdcl_inla(
    model: &ModelDefinition,
    fit: &FitResult,
    t: usize,
    r: usize,
    method: HMethod,
    seed: u64,
) -> Result<CvdclEstimate> {
    InlaSelector::new(model, fit)?.cvdcl(t, r, method, seed)
}

/// The chain estimator: harmonic mean of the conditional event likelihood
/// over draws, with a batch-means standard error.
pub fn cvdcl_mcmc(model: &ModelDefinition, chain: &ChainResult, t: usize, n_batches: usize) -> Result<CvdclEstimate> {
    let g = chain.len();
    if n_batches == 0 || g == 0 || g % n_batches != 0 {
        return Err(StjmError::Config(format!(
            "{g} draws cannot be split into {n_batches} equal batches"
        )));
    }
    let loans = at_risk_loans(model, t)?;
    let hypers: Vec<HyperParams> = chain
        .theta
        .iter()
        .map(|th| model.hyper_from_internal(th))
        .collect::<Result<_>>()?;
    let l = &model.layout;
    // neg_ll[i][g] = −log p(T_i, δ_i | T_i > t, U_i^(g), Θ^(g))
    let neg_ll: Vec<Vec<f64>> = loans
        .par_iter()
        .map(|&i| {
            let loan = &model.dataset.loans[i];
            chain
                .latent
                .iter()
                .zip(&hypers)
                .map(|(mu, h)| {
                    let off = survival_offsets(model, mu, i, loan.duration());
                    -event_loglik(&off, loan.prepaid, h.lambda, [mu[l.u0(i)], mu[l.u1(i)]], t)
                })
                .collect()
        })
        .collect();
    let term = |v: &[f64]| log_sum_exp(v) - (v.len() as f64).ln();
    let terms: Vec<f64> = neg_ll.iter().map(|v| term(v)).collect();
    let h = g / n_batches;
    let nt = loans.len() as f64;
    let batch: Vec<f64> = (0..n_batches)
        .map(|m| neg_ll.iter().map(|v| term(&v[m * h..(m + 1) * h])).sum::<f64>() / nt)
        .collect();
    let mc_se = if n_batches > 1 {
        let mean = batch.iter().sum::<f64>() / n_batches as f64;
        let var = batch.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
        (var / n_batches as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(finish(t, &loans, model, terms, mc_se, 0))
}

/// Estimates of one model at several times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvdclReport {
    pub model: String,
    /// `inla-laplace`, `inla-eb`, `quadrature-oracle` or `mcmc`.
    pub method: String,
    pub estimates: Vec<CvdclEstimate>,
}

impl CvdclReport {
    pub fn at(&self, t: usize) -> Option<&CvdclEstimate> {
        self.estimates.iter().find(|e| e.t == t)
    }
}

/// Long-format table: `t,N_t,model,method,estimate,mc_se`.
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[CvdclReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "N_t", "model", "method", "estimate", "mc_se"])?;
    let mut times: Vec<usize> = reports.iter().flat_map(|r| r.estimates.iter().map(|e| e.t)).collect();
    times.sort_unstable();
    times.dedup();
    for t in times {
        for r in reports {
            if let Some(e) = r.at(t) {
                w.write_record([
                    t.to_string(),
                    e.n_at_risk.to_string(),
                    r.model.clone(),
                    r.method.clone(),
                    format!("{:.6}", e.estimate),
                    format!("{:.6e}", e.mc_se),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-area table at time `t`: `area`, one contribution column per report and
/// one difference column per non-baseline report (the first report is the baseline).
pub fn write_area_csv(path: impl AsRef<Path>, t: usize, reports: &[CvdclReport]) -> Result<()> {
    let tables: Vec<BTreeMap<usize, f64>> = reports
        .iter()
        .map(|r| r.at(t).map(cvdcl_by_area).unwrap_or_default())
        .collect();
    let mut areas: Vec<usize> = tables.iter().flat_map(|m| m.keys().copied()).collect();
    areas.sort_unstable();
    areas.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["area".to_string()];
    header.extend(reports.iter().map(|r| format!("{}_contribution", r.model)));
    if let Some(base) = reports.first() {
        header.extend(reports[1..].iter().map(|r| format!("{}_minus_{}", r.model, base.model)));
    }
    w.write_record(&header)?;
    let diffs: Vec<BTreeMap<usize, f64>> = tables
        .iter()
        .skip(1)
        .map(|m| area_differences(m, &tables[0]))
        .collect();
    for a in areas {
        let mut rec = vec![a.to_string()];
        rec.extend(tables.iter().map(|m| format!("{:.8}", m.get(&a).copied().unwrap_or(0.0))));
        rec.extend(diffs.iter().map(|m| format!("{:.8}", m.get(&a).copied().unwrap_or(0.0))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::Variant;
    use crate::graph::AdjacencyGraph;
    use crate::model::{build_model, ModelConfig};
    use crate::simulate::{simulate_temporal, simulate_stjm, SimConfig};

    fn small_model(seed: u64, n: usize) -> ModelDefinition {
        let cfg = SimConfig {
            seed: Some(seed),
            n_loans: n,
            t_study: 12,
            nu0: -2.0,
            ..SimConfig::default()
        };
        let (d, _) = simulate_temporal(&cfg).unwrap();
        let mc = ModelConfig {
            covariates: vec!["z1".into(), "z2".into()],
            ..ModelConfig::default()
        };
        build_model(d, None, Variant::M1, mc).unwrap()
    }

    fn hyper(lambda: f64) -> HyperParams {
        HyperParams {
            tau_y: 25.0,
            tau_u0: 10.0,
            tau_u1: 900.0,
            rho01: -0.1,
            lambda,
            tau_v: 100.0,
            tau_u: None,
            tau_delta: None,
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, lambda: Option<f64>) -> HProblem {
        let t = rng.gen_range(3..=15);
        let ti = t + rng.gen_range(1..=12);
        let h = HyperParams {
            tau_y: rng.gen_range(5.0..50.0),
            tau_u0: rng.gen_range(2.0..20.0),
            tau_u1: rng.gen_range(100.0..2000.0),
            rho01: rng.gen_range(-0.5..0.5),
            lambda: lambda.unwrap_or_else(|| rng.gen_range(-1.0..1.0)),
            tau_v: 1.0,
            tau_u: None,
            tau_delta: None,
        };
        let cov = h.cov_u();
        let l = cov.cholesky().unwrap().l();
        let u = l * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let resid = (1..=t)
            .map(|s| u[0] + u[1] * s as f64 + rng.sample::<f64, _>(StandardNormal) / h.tau_y.sqrt())
            .collect();
        let offsets = (0..ti).map(|_| -2.8 + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        HProblem {
            q_u: h.q_u().unwrap(),
            tau_y: h.tau_y,
            lambda: h.lambda,
            resid,
            offsets,
            prepaid: rng.gen_bool(0.5),
            t,
        }
    }

    #[test]
    fn zero_predictor_gives_half_probabilities() {
        let m = small_model(1, 40);
        let (i, loan) = m
            .dataset
            .loans
            .iter()
            .enumerate()
            .find(|(_, l)| !l.prepaid && l.duration() == 12)
            .expect("a censored loan");
        assert_eq!(loan.duration(), 12);
        let mu = vec![0.0; m.dim()];
        let v = conditional_event_loglik(&m, &hyper(0.7), &mu, [0.0, 0.0], i, 9).unwrap();
        assert!((v - 3.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            conditional_event_loglik(&m, &hyper(0.7), &mu, [0.0, 0.0], i, 12),
            Err(StjmError::NotAtRisk { t: 12, .. })
        ));
    }

    #[test]
    fn certain_event_has_zero_log_likelihood() {
        let m = small_model(2, 60);
        let (i, loan) = m
            .dataset
            .loans
            .iter()
            .enumerate()
            .find(|(_, l)| l.prepaid && l.duration() >= 2)
            .expect("a prepaid loan");
        let mut mu = vec![0.0; m.dim()];
        mu[m.layout.nu0()] = 60.0;
        let v = conditional_event_loglik(&m, &hyper(0.0), &mu, [0.0, 0.0], i, loan.duration() - 1).unwrap();
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn event_loglik_matches_design_row_product() {
        let m = small_model(3, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = hyper(0.4);
        for i in 0..m.dataset.n_loans() {
            let ti = m.dataset.loans[i].duration();
            if ti < 2 {
                continue;
            }
            let mu: Vec<f64> = (0..m.dim()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let t = ti / 2;
            let got = conditional_event_loglik(&m, &h, &mu, [mu[m.layout.u0(i)], mu[m.layout.u1(i)]], i, t).unwrap();
            let mut prob = 1.0;
            for s in t + 1..=ti {
                let (_, row) = m.design_rows(i, s, h.lambda).unwrap();
                let eta: f64 = row.iter().map(|(k, c)| c * mu[*k]).sum();
                let p = 1.0 / (1.0 + (-eta).exp());
                prob *= if m.dataset.loans[i].event_at(s) { p } else { 1.0 - p };
            }
            assert!((got - prob.ln()).abs() < 1e-12, "loan {i}: {got} vs {}", prob.ln());
        }
    }

    #[test]
    fn methods_agree_exactly_without_association() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_problem(&mut rng, Some(0.0));
            let exact = -p.log_g(Vector2::zeros()).val;
            for method in [HMethod::Laplace, HMethod::Eb, HMethod::Quadrature] {
                let v = log_h(&p, method, [0.0, 0.0]).unwrap().log_h;
                assert!((v.exp() / exact.exp() - 1.0).abs() < 1e-10, "{method:?}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn laplace_and_eb_track_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..25 {
            let p = random_problem(&mut rng, None);
            let q = log_h(&p, HMethod::Quadrature, [0.0, 0.0]).unwrap().log_h.exp();
            let l = log_h(&p, HMethod::Laplace, [0.0, 0.0]).unwrap().log_h.exp();
            let e = log_h(&p, HMethod::Eb, [0.0, 0.0]).unwrap().log_h.exp();
            assert!((l / q - 1.0).abs() < 0.05, "laplace {l} vs {q}");
            assert!((e / q - 1.0).abs() < 0.15, "eb {e} vs {q}");
        }
    }

    #[test]
    fn quadrature_h_matches_brute_force_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_problem(&mut rng, Some(0.8));
        let (uf, qf) = maximise(|u| p.log_f(u), Vector2::zeros()).unwrap();
        let cov = (-qf.hess).try_inverse().unwrap();
        let (s0, s1) = (cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt());
        let n = 600;
        let (mut num, mut den) = (Vec::new(), Vec::new());
        for a in 0..n {
            for b in 0..n {
                let u = Vector2::new(
                    uf[0] + s0 * (-10.0 + 20.0 * a as f64 / n as f64),
                    uf[1] + s1 * (-10.0 + 20.0 * b as f64 / n as f64),
                );
                num.push(p.log_num(u).val);
                den.push(p.log_f(u).val);
            }
        }
        let brute = log_sum_exp(&num) - log_sum_exp(&den);
        let q = log_h(&p, HMethod::Quadrature, [0.0, 0.0]).unwrap().log_h;
        assert!((q - brute).abs() < 1e-6, "{q} vs {brute}");
    }

    #[test]
    fn degenerate_grid_reduces_to_direct_likelihood() {
        let m = small_model(5, 40);
        let mut theta = hyper(0.0).to_internal();
        theta[4] = 0.0;
        let sel = InlaSelector::from_points(&m, &[(theta.clone(), 1.0, None)]).unwrap();
        let t = 4;
        let est = sel.cvdcl(t, 1, HMethod::Laplace, 11).unwrap();
        assert!(est.mc_se.is_nan());
        let h = m.hyper_from_internal(&theta).unwrap();
        let mut direct = 0.0;
        let loans = at_risk_loans(&m, t).unwrap();
        for &i in &loans {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(i as u64);
            let mut mu = vec![0.0; m.dim()];
            sel.grid[0].areas[&1].draw(&mut rng, &mut mu);
            direct -= conditional_event_loglik(&m, &h, &mu, [0.0, 0.0], i, t).unwrap();
        }
        direct /= loans.len() as f64;
        assert!((est.estimate - direct).abs() < 1e-10, "{} vs {direct}", est.estimate);
        assert_eq!(est.n_at_risk, m.dataset.at_risk(t));
    }

    #[test]
    fn inla_estimate_is_reproducible_and_rejects_empty_risk_sets() {
        let m = small_model(6, 30);
        let theta = hyper(0.5).to_internal();
        let sel = InlaSelector::from_points(&m, &[(theta.clone(), 0.7, None), (theta, 0.3, None)]).unwrap();
        let a = sel.cvdcl(3, 4, HMethod::Eb, 1).unwrap();
        let b = sel.cvdcl(3, 4, HMethod::Eb, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.mc_se > 0.0);
        assert!(matches!(sel.cvdcl(12, 4, HMethod::Eb, 1), Err(StjmError::NoneAtRisk(12))));
    }

    fn toy_chain(m: &ModelDefinition, draws: Vec<Vec<f64>>) -> ChainResult {
        let theta = hyper(0.5).to_internal();
        ChainResult {
            seed: 0,
            iterations: draws.len(),
            burn_in: 0,
            thin: 1,
            hyper_names: HyperParams::names(m.variant).into_iter().map(String::from).collect(),
            acceptance: BTreeMap::new(),
            proposal_scale: 1.0,
            theta: vec![theta.clone(); draws.len()],
            hyper: vec![theta; draws.len()],
            latent: draws,
        }
    }

    #[test]
    fn identical_draws_have_zero_batch_error() {
        let m = small_model(7, 30);
        let mu: Vec<f64> = (0..m.dim()).map(|k| 0.01 * (k % 7) as f64).collect();
        let chain = toy_chain(&m, vec![mu; 20]);
        let est = cvdcl_mcmc(&m, &chain, 3, 5).unwrap();
        assert_eq!(est.mc_se, 0.0);
        assert!(cvdcl_mcmc(&m, &chain, 3, 3).is_err());
    }

    #[test]
    fn chain_estimator_is_a_harmonic_mean() {
        let m = small_model(8, 30);
        let a = vec![0.0; m.dim()];
        let mut b = a.clone();
        b[m.layout.nu0()] = -1.0;
        let chain = toy_chain(&m, vec![a.clone(), b.clone()]);
        let t = 2;
        let est = cvdcl_mcmc(&m, &chain, t, 1).unwrap();
        let h = hyper(0.5);
        let loans = at_risk_loans(&m, t).unwrap();
        let mut direct = 0.0;
        for &i in &loans {
            let pa = conditional_event_loglik(&m, &h, &a, [0.0, 0.0], i, t).unwrap().exp();
            let pb = conditional_event_loglik(&m, &h, &b, [0.0, 0.0], i, t).unwrap().exp();
            direct += (0.5 * (1.0 / pa + 1.0 / pb)).ln();
        }
        direct /= loans.len() as f64;
        assert!((est.estimate - direct).abs() < 1e-12);
    }

    #[test]
    fn area_decomposition_partitions_the_estimate() {
        let g = AdjacencyGraph::lattice(2, 2).unwrap();
        let cfg = SimConfig {
            seed: Some(3),
            n_loans: 40,
            t_study: 10,
            nu0: -2.0,
            hyper: HyperParams {
                tau_u: Some(5.0),
                ..SimConfig::default().hyper
            },
            ..SimConfig::default()
        };
        let (d, _) = simulate_stjm(&cfg, &g).unwrap();
        let mc = ModelConfig {
            covariates: vec!["z1".into()],
            ..ModelConfig::default()
        };
        let m = build_model(d, Some(g), Variant::M2, mc).unwrap();
        let mut theta = hyper(0.3).to_internal();
        theta.push(1.0);
        let sel = InlaSelector::from_points(&m, &[(theta, 1.0, None)]).unwrap();
        let est = sel.cvdcl(4, 3, HMethod::Eb, 2).unwrap();
        let areas = cvdcl_by_area(&est);
        assert!(areas.len() > 1);
        assert!((areas.values().sum::<f64>() - est.estimate).abs() < 1e-10);

        // Moving two loans between areas moves exactly their terms.
        let mut swapped = est.clone();
        let (x, y) = (0, swapped.loan_terms.len() - 1);
        let (ax, ay) = (swapped.loan_terms[x].1, swapped.loan_terms[y].1);
        swapped.loan_terms[x].1 = ay;
        swapped.loan_terms[y].1 = ax;
        let moved = cvdcl_by_area(&swapped);
        let (vx, vy) = (est.loan_terms[x].2, est.loan_terms[y].2);
        for (a, v) in &moved {
            let mut expect = areas.get(a).copied().unwrap_or(0.0);
            if *a == ax {
                expect += vy - vx;
            }
            if *a == ay {
                expect += vx - vy;
            }
            assert!((v - expect).abs() < 1e-12);
        }
        let diff = area_differences(&areas, &areas);
        assert!(diff.values().all(|v| *v == 0.0));
    }

    #[test]
    fn single_area_carries_the_whole_estimate() {
        let m = small_model(9, 30);
        let theta = hyper(0.2).to_internal();
        let sel = InlaSelector::from_points(&m, &[(theta, 1.0, None)]).unwrap();
        let est = sel.cvdcl(3, 2, HMethod::Eb, 5).unwrap();
        let areas = cvdcl_by_area(&est);
        assert_eq!(areas.len(), 1);
        assert!((areas[&1] - est.estimate).abs() < 1e-12);
    }

    #[test]
    fn report_csvs_have_expected_shape() {
        let m = small_model(10, 30);
        let theta = hyper(0.2).to_internal();
        let sel = InlaSelector::from_points(&m, &[(theta, 1.0, None)]).unwrap();
        let rep = |name: &str| CvdclReport {
            model: name.into(),
            method: HMethod::Eb.tag().into(),
            estimates: vec![sel.cvdcl(3, 2, HMethod::Eb, 5).unwrap(), sel.cvdcl(5, 2, HMethod::Eb, 5).unwrap()],
        };
        let reports = [rep("m1"), rep("m1b")];
        let dir = tempfile::tempdir().unwrap();
        write_report_csv(dir.path().join("r.csv"), &reports).unwrap();
        write_area_csv(dir.path().join("a.csv"), 3, &reports).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,N_t,model,method,estimate,mc_se"));
        let area = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(area.lines().next().unwrap(), "area,m1_contribution,m1b_contribution,m1b_minus_m1");
    }
}

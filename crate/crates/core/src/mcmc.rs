//! Metropolis-within-Gibbs sampler for latent Gaussian models.
//!
//! Each sweep makes a joint move of `(θ, μ)`: a random-walk proposal for `θ`
//! on the internal scale with a fresh latent draw from the Gaussian
//! approximation at the proposed `θ`. It then makes independence moves for
//! the latent block from the approximation at the current `θ`. Both moves are
//! accepted with the exact posterior ratio.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StjmError};
use crate::laplace::{gaussian_approximation, GaussApprox, NewtonOptions, ParamSummary};
use crate::lgm::LatentModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Starting hyperparameters (internal scale); the model's initial values otherwise.
    pub initial_theta: Option<Vec<f64>>,
    /// Shape of the random-walk proposal; a small diagonal otherwise.
    pub proposal_covariance: Option<Vec<Vec<f64>>>,
    /// Keep `θ` at its starting value and only update the latent field.
    pub fixed_theta: bool,
    /// Independence moves of the latent block per sweep.
    pub latent_steps: usize,
    /// Sweeps between adaptations of the proposal scale during burn-in.
    pub adapt_every: usize,
    pub newton: NewtonOptions,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 5,
            seed: 0,
            initial_theta: None,
            proposal_covariance: None,
            fixed_theta: false,
            latent_steps: 1,
            adapt_every: 50,
            newton: NewtonOptions::default(),
        }
    }
}

/// Thinned post-burn-in draws with their bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub hyper_names: Vec<String>,
    /// Acceptance rate of each block after burn-in, keyed `theta` and `latent`.
    pub acceptance: BTreeMap<String, f64>,
    /// Final random-walk scale multiplier.
    pub proposal_scale: f64,
    /// Internal-scale hyperparameters of each draw.
    #[serde(skip)]
    pub theta: Vec<Vec<f64>>,
    /// Reporting-scale hyperparameters of each draw.
    #[serde(skip)]
    pub hyper: Vec<Vec<f64>>,
    #[serde(skip)]
    pub latent: Vec<Vec<f64>>,
}

impl ChainResult {
    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    /// Trace of reporting-scale hyperparameter `k`.
    pub fn hyper_trace(&self, k: usize) -> Vec<f64> {
        self.hyper.iter().map(|h| h[k]).collect()
    }

    pub fn latent_trace(&self, k: usize) -> Vec<f64> {
        self.latent.iter().map(|x| x[k]).collect()
    }

    /// Empirical summaries of every hyperparameter.
    pub fn hyper_summaries(&self) -> Vec<ParamSummary> {
        self.hyper_names
            .iter()
            .enumerate()
            .map(|(k, n)| empirical_summary(n, &self.hyper_trace(k)))
            .collect()
    }

    /// Empirical summaries of the latent coordinates `indices`.
    pub fn latent_summaries(&self, names: &[String], indices: impl IntoIterator<Item = usize>) -> Vec<ParamSummary> {
        indices
            .into_iter()
            .map(|k| empirical_summary(&names[k], &self.latent_trace(k)))
            .collect()
    }

    /// Writes `chain.csv` (one row per draw) and `chain.json` (metadata) into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, latent_names: &[String]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("chain.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("chain.csv"))?;
        let mut header = vec!["draw".to_string()];
        header.extend(self.hyper_names.iter().map(|n| format!("theta:{n}")));
        header.extend(latent_names.iter().cloned());
        w.write_record(&header)?;
        for (g, (t, x)) in self.theta.iter().zip(&self.latent).enumerate() {
            let mut rec = vec![g.to_string()];
            rec.extend(t.iter().chain(x).map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a chain written by [`ChainResult::write`]; reporting-scale
    /// hyperparameters are recomputed through `to_user`.
    pub fn read(dir: impl AsRef<Path>, to_user: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let dir = dir.as_ref();
        let mut chain: ChainResult = serde_json::from_str(&std::fs::read_to_string(dir.join("chain.json"))?)?;
        let m = chain.hyper_names.len();
        let mut r = csv::Reader::from_path(dir.join("chain.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| StjmError::Data(format!("chain.csv: {e}")))?;
            if vals.len() < m {
                return Err(StjmError::Data("chain.csv row shorter than the hyperparameter list".into()));
            }
            let theta = vals[..m].to_vec();
            chain.hyper.push(theta.iter().enumerate().map(|(k, &x)| to_user(k, x)).collect());
            chain.theta.push(theta);
            chain.latent.push(vals[m..].to_vec());
        }
        Ok(chain)
    }
}

/// Mean, sd and type-7 quantiles of a sample.
pub fn empirical_summary(name: &str, values: &[f64]) -> ParamSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        if sorted.is_empty() {
            return f64::NAN;
        }
        let h = (n - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    ParamSummary {
        name: name.to_string(),
        mean,
        sd,
        q025: q(0.025),
        q50: q(0.5),
        q975: q(0.975),
    }
}

/// Runs the sampler with default options apart from the chain lengths and seed.
pub fn run_mcmc<M: LatentModel + ?Sized>(
    model: &M,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<ChainResult> {
    run_mcmc_with(
        model,
        &McmcOptions {
            iterations,
            burn_in,
            thin,
            seed,
            ..McmcOptions::default()
        },
    )
}

struct State {
    theta: Vec<f64>,
    ga: GaussApprox,
    x: DVector<f64>,
    /// `log p(D, μ, θ) − log q_θ(μ)` at the current state.
    log_w: f64,
}

fn log_joint<M: LatentModel + ?Sized>(model: &M, ga: &GaussApprox, x: &DVector<f64>) -> f64 {
    let p = model.pattern();
    p.log_likelihood(&ga.instance, x.as_slice()) + p.log_prior(&ga.instance, x.as_slice()) + model.log_hyper_prior(&ga.theta)
}

fn importance_log_weight<M: LatentModel + ?Sized>(model: &M, ga: &GaussApprox, x: &DVector<f64>) -> f64 {
    log_joint(model, ga, x) - ga.log_density(model.pattern(), x)
}

pub fn run_mcmc_with<M: LatentModel + ?Sized>(model: &M, opts: &McmcOptions) -> Result<ChainResult> {
    if opts.iterations <= opts.burn_in {
        return Err(StjmError::Config(format!(
            "iterations ({}) must exceed burn-in ({})",
            opts.iterations, opts.burn_in
        )));
    }
    if opts.thin == 0 {
        return Err(StjmError::Config("thin must be at least 1".into()));
    }
    let pattern = model.pattern();
    let names = model.hyper_names();
    let m = names.len();
    let theta0 = opts.initial_theta.clone().unwrap_or_else(|| model.initial_theta());
    if theta0.len() != m {
        return Err(StjmError::Config(format!("initial theta has {} entries, expected {m}", theta0.len())));
    }
    let mut cov = match &opts.proposal_covariance {
        Some(c) => {
            if c.len() != m || c.iter().any(|r| r.len() != m) {
                return Err(StjmError::Config(format!("proposal covariance must be {m}×{m}")));
            }
            DMatrix::from_fn(m, m, |i, j| c[i][j])
        }
        None => DMatrix::from_diagonal_element(m, m, 0.01),
    };
    let mut chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| StjmError::Config("proposal covariance is not positive definite".into()))?
        .l();
    let mut scale = if m > 0 { 2.38 / (m as f64).sqrt() } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ga = gaussian_approximation(model, &theta0, None, &opts.newton)?;
    let x = ga.mode.clone();
    let log_w = importance_log_weight(model, &ga, &x);
    let mut st = State {
        theta: theta0,
        ga,
        x,
        log_w,
    };

    let mut acc = [0usize; 2];
    let mut tried = [0usize; 2];
    let mut window_acc = 0usize;
    let mut window_tried = 0usize;
    let mut burn_thetas: Vec<Vec<f64>> = Vec::new();
    let mut chain = ChainResult {
        seed: opts.seed,
        iterations: opts.iterations,
        burn_in: opts.burn_in,
        thin: opts.thin,
        hyper_names: names,
        acceptance: BTreeMap::new(),
        proposal_scale: scale,
        theta: Vec::new(),
        hyper: Vec::new(),
        latent: Vec::new(),
    };

    for it in 0..opts.iterations {
        let burning = it < opts.burn_in;
        if !opts.fixed_theta && m > 0 {
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &chol * z * scale;
            let prop: Vec<f64> = st.theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let u: f64 = rng.gen();
            let mut accepted = false;
            match gaussian_approximation(model, &prop, Some(&st.ga.mode), &opts.newton) {
                Ok(ga) => {
                    let x = ga.sample(pattern, &mut rng);
                    let lw = importance_log_weight(model, &ga, &x);
                    if lw.is_finite() && u.ln() < lw - st.log_w {
                        st = State {
                            theta: prop,
                            ga,
                            x,
                            log_w: lw,
                        };
                        accepted = true;
                    }
                }
                Err(e) => debug!("proposal at {prop:?} rejected: {e}"),
            }
            if !burning {
                tried[0] += 1;
                acc[0] += usize::from(accepted);
            } else {
                window_tried += 1;
                window_acc += usize::from(accepted);
            }
        }
        for _ in 0..opts.latent_steps {
            let x = st.ga.sample(pattern, &mut rng);
            let lw = importance_log_weight(model, &st.ga, &x);
            let u: f64 = rng.gen();
            let accepted = lw.is_finite() && u.ln() < lw - st.log_w;
            if accepted {
                st.x = x;
                st.log_w = lw;
            }
            if !burning {
                tried[1] += 1;
                acc[1] += usize::from(accepted);
            }
        }

        if burning && m > 0 && !opts.fixed_theta {
            burn_thetas.push(st.theta.clone());
            if window_tried >= opts.adapt_every.max(1) {
                let rate = window_acc as f64 / window_tried as f64;
                if rate < 0.23 {
                    scale *= 0.8;
                } else if rate > 0.44 {
                    scale *= 1.25;
                }
                window_acc = 0;
                window_tried = 0;
            }
            // Learn the proposal shape once, halfway through burn-in.
            if it + 1 == opts.burn_in / 2 && burn_thetas.len() >= 10 * (m + 1) {
                let tail = &burn_thetas[burn_thetas.len() / 2..];
                let emp = sample_covariance(tail);
                let candidate = emp + DMatrix::from_diagonal_element(m, m, 1e-8);
                if let Some(c) = candidate.clone().cholesky() {
                    if candidate.diagonal().iter().all(|v| *v > 1e-10) {
                        cov = candidate;
                        chol = c.l();
                        scale = 2.38 / (m as f64).sqrt();
                        debug!("proposal covariance learned: {cov}");
                    }
                }
            }
        }
        if !burning && (it - opts.burn_in) % opts.thin == 0 {
            chain.hyper.push(
                st.theta
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| model.hyper_to_user(k, v))
                    .collect(),
            );
            chain.theta.push(st.theta.clone());
            chain.latent.push(st.x.as_slice().to_vec());
        }
    }
    let rate = |k: usize| if tried[k] == 0 { f64::NAN } else { acc[k] as f64 / tried[k] as f64 };
    if m > 0 && !opts.fixed_theta {
        chain.acceptance.insert("theta".into(), rate(0));
    }
    chain.acceptance.insert("latent".into(), rate(1));
    chain.proposal_scale = scale;
    info!("chain finished: {} draws, acceptance {:?}", chain.len(), chain.acceptance);
    Ok(chain)
}

fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..m).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    DMatrix::from_fn(m, m, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)
    })
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
/// Returns `(ess, degenerate)`; a constant trace gives `(1, true)`.
pub fn effective_sample_size(x: &[f64]) -> (f64, bool) {
    let n = x.len();
    if n < 2 {
        return (n as f64, true);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let acov = |k: usize| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = acov(0);
    if g0 <= (f64::EPSILON * mean.abs()).powi(2) || g0 == 0.0 {
        return (1.0, true);
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = acov(k) + acov(k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    let sigma2 = 2.0 * sum - g0;
    if sigma2 <= 0.0 {
        return (1.0, true);
    }
    ((n as f64 * g0 / sigma2).max(1.0), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub ess: f64,
    pub degenerate: bool,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub draws: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub params: Vec<ParamDiagnostics>,
}

fn param_diagnostics(name: &str, trace: &[f64]) -> ParamDiagnostics {
    let (ess, degenerate) = effective_sample_size(trace);
    ParamDiagnostics {
        name: name.to_string(),
        ess,
        degenerate,
        min: trace.iter().copied().fold(f64::INFINITY, f64::min),
        max: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// ESS, acceptance rates and trace extrema for every hyperparameter and the
/// requested latent coordinates.
pub fn diagnostics(chain: &ChainResult, latent: &[(String, usize)]) -> Result<ChainDiagnostics> {
    if chain.is_empty() {
        return Err(StjmError::Config("chain has no draws".into()));
    }
    let mut params: Vec<ParamDiagnostics> = chain
        .hyper_names
        .iter()
        .enumerate()
        .map(|(k, n)| param_diagnostics(n, &chain.hyper_trace(k)))
        .collect();
    params.extend(latent.iter().map(|(n, k)| param_diagnostics(n, &chain.latent_trace(*k))));
    Ok(ChainDiagnostics {
        draws: chain.len(),
        acceptance: chain.acceptance.clone(),
        params,
    })
}

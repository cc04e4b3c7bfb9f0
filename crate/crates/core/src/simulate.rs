//! Synthetic joint-model data: the temporal-only design with two survival
//! covariates, and its spatial extension with area and interaction effects.

use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{balance_from_outcome, LoanPurpose, LoanRecord, PanelDataset, PanelLoan};
use crate::error::{Result, StjmError};
use crate::gmrf::{build_icar_structure, build_rw2_structure, sample_intrinsic, sample_intrinsic_kron};
use crate::graph::AdjacencyGraph;
use crate::lgm::logistic;
use crate::model::HyperParams;

/// Stream ids for the global effects; per-loan streams start above these.
const STREAM_V: u64 = 0;
const STREAM_U: u64 = 1;
const STREAM_DELTA: u64 = 2;
const LOAN_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_loans: usize,
    pub t_study: usize,
    pub seed: Option<u64>,
    pub hyper: HyperParams,
    pub beta01: f64,
    pub beta11: f64,
    pub nu0: f64,
    /// Survival coefficients of the standard-normal covariates `z1, z2, ...`.
    pub beta2: Vec<f64>,
    /// Deterministic linear trend added to the centred RW2 draw of `v`.
    pub baseline_slope: f64,
    /// Deterministic quadratic term `c · (s − s̄)²` added to `v` before centring.
    pub baseline_curvature: f64,
    /// Spatial generation on a `rows × cols` rook lattice.
    pub lattice: Option<[usize; 2]>,
    /// Spatial generation on an adjacency file (takes precedence over `lattice`).
    pub adjacency: Option<PathBuf>,
    /// Relative area probabilities; uniform when absent.
    pub area_weights: Option<Vec<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_loans: 500,
            t_study: 40,
            seed: None,
            hyper: HyperParams {
                tau_y: 25.0,
                tau_u0: 10.0,
                tau_u1: 900.0,
                rho01: -0.1,
                lambda: 0.2,
                tau_v: 5000.0,
                tau_u: None,
                tau_delta: None,
            },
            beta01: 0.0,
            beta11: 0.025,
            nu0: -2.5,
            beta2: vec![0.5, 1.5],
            baseline_slope: 0.22,
            baseline_curvature: -0.001,
            lattice: None,
            adjacency: None,
            area_weights: None,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| StjmError::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| StjmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        for (name, v) in [
            ("tau_Y", Some(h.tau_y)),
            ("tau_U0", Some(h.tau_u0)),
            ("tau_U1", Some(h.tau_u1)),
            ("tau_v", Some(h.tau_v)),
            ("tau_u", h.tau_u),
            ("tau_delta", h.tau_delta),
        ] {
            if let Some(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(StjmError::Config(format!("{name} must be positive, got {x}")));
                }
            }
        }
        if !(h.rho01.abs() < 1.0) {
            return Err(StjmError::Config(format!("|rho_01| must be below 1, got {}", h.rho01)));
        }
        if self.n_loans == 0 {
            return Err(StjmError::Config("n_loans must be positive".into()));
        }
        if self.t_study < 3 {
            return Err(StjmError::Config("t_study must be at least 3".into()));
        }
        Ok(())
    }

    /// The graph requested by `adjacency` or `lattice`, if any.
    pub fn graph(&self) -> Result<Option<AdjacencyGraph>> {
        if let Some(p) = &self.adjacency {
            return AdjacencyGraph::read(p).map(Some);
        }
        self.lattice.map(|[r, c]| AdjacencyGraph::lattice(r, c)).transpose()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.beta2.len()).map(|k| format!("z{k}")).collect()
    }
}

/// The parameter values and latent effects a dataset was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub seed: u64,
    pub hyper: HyperParams,
    pub beta01: f64,
    pub beta11: f64,
    pub nu0: f64,
    pub beta2: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Full temporal effect `v_s`, trend included.
    pub v: Vec<f64>,
    pub u: Option<Vec<f64>>,
    /// Time-major interaction effects.
    pub delta: Option<Vec<f64>>,
    /// Per-loan `(U₀ᵢ, U₁ᵢ)`.
    pub random_effects: Vec<[f64; 2]>,
}

impl SimTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn seed_of(config: &SimConfig) -> Result<u64> {
    config.seed.ok_or_else(|| StjmError::Config("seed required".into()))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Temporal-only design: `η_X = ν₀ + v_s + zᵀβ₂ + λ(U₀ + U₁ s)`, all loans in area 1.
pub fn simulate_temporal(config: &SimConfig) -> Result<(PanelDataset, SimTruth)> {
    simulate(config, None)
}

/// Spatial design: adds `u_a` when `tau_u` is set and `δ_{a,s}` when `tau_delta` is set.
pub fn simulate_stjm(config: &SimConfig, graph: &AdjacencyGraph) -> Result<(PanelDataset, SimTruth)> {
    simulate(config, Some(graph))
}

fn simulate(config: &SimConfig, graph: Option<&AdjacencyGraph>) -> Result<(PanelDataset, SimTruth)> {
    config.validate()?;
    let seed = seed_of(config)?;
    let t = config.t_study;
    let h = config.hyper;

    let rv = build_rw2_structure(t)?;
    let mut v = sample_intrinsic(&rv, h.tau_v, &mut stream(seed, STREAM_V))?;
    let centre = (t as f64 + 1.0) / 2.0;
    let quad: Vec<f64> = (1..=t).map(|s| config.baseline_curvature * (s as f64 - centre).powi(2)).collect();
    let quad_mean = quad.iter().sum::<f64>() / t as f64;
    for s in 1..=t {
        v[s - 1] += config.baseline_slope * (s as f64 - centre) + quad[s - 1] - quad_mean;
    }

    let (u, delta) = match graph {
        Some(g) => {
            let ru = build_icar_structure(g);
            let u = h
                .tau_u
                .map(|tau| sample_intrinsic(&ru, tau, &mut stream(seed, STREAM_U)))
                .transpose()?;
            let d = h
                .tau_delta
                .map(|tau| sample_intrinsic_kron(&rv, &ru, tau, &mut stream(seed, STREAM_DELTA)))
                .transpose()?;
            (u, d)
        }
        None => (None, None),
    };
    let n_areas = graph.map_or(1, AdjacencyGraph::n_areas);
    let area_dist = match &config.area_weights {
        Some(w) if w.len() != n_areas => {
            return Err(StjmError::Config(format!(
                "area_weights has {} entries for {n_areas} areas",
                w.len()
            )))
        }
        Some(w) => WeightedIndex::new(w).map_err(|e| StjmError::Config(format!("area_weights: {e}")))?,
        None => WeightedIndex::new(vec![1.0; n_areas]).expect("uniform weights"),
    };
    let cov = h.cov_u();
    let l00 = cov[(0, 0)].sqrt();
    let l10 = cov[(1, 0)] / l00;
    let l11 = (cov[(1, 1)] - l10 * l10).sqrt();
    let sd_y = 1.0 / h.tau_y.sqrt();
    let p = config.beta2.len();

    let mut loans = Vec::with_capacity(config.n_loans);
    let mut random_effects = Vec::with_capacity(config.n_loans);
    for i in 0..config.n_loans {
        let base = LOAN_STREAM_BASE + 2 * i as u64;
        let area = if graph.is_some() {
            area_dist.sample(&mut stream(seed, base + 1)) + 1
        } else {
            1
        };
        let mut rng = stream(seed, base);
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let u0 = l00 * e0;
        let u1 = l10 * e0 + l11 * e1;
        let lin: f64 = config.nu0 + z.iter().zip(&config.beta2).map(|(a, b)| a * b).sum::<f64>()
            + u.as_ref().map_or(0.0, |u| u[area - 1]);
        let mut y = Vec::new();
        let mut prepaid = false;
        for s in 1..=t {
            let sf = s as f64;
            let eps: f64 = rng.sample(StandardNormal);
            y.push(config.beta01 + u0 + (config.beta11 + u1) * sf + sd_y * eps);
            let eta = lin
                + v[s - 1]
                + delta.as_ref().map_or(0.0, |d| d[(s - 1) * n_areas + area - 1])
                + h.lambda * (u0 + u1 * sf);
            if rng.gen::<f64>() < logistic(eta) {
                prepaid = true;
                break;
            }
        }
        loans.push(PanelLoan {
            loan_id: format!("L{:06}", i + 1),
            area,
            prepaid,
            y,
            covariates: z,
        });
        random_effects.push([u0, u1]);
    }
    let names = config.covariate_names();
    let dataset = PanelDataset::new(loans, t, names.clone())?;
    let truth = SimTruth {
        seed,
        hyper: h,
        beta01: config.beta01,
        beta11: config.beta11,
        nu0: config.nu0,
        beta2: config.beta2.clone(),
        covariate_names: names,
        v: v.as_slice().to_vec(),
        u: u.map(|x| x.as_slice().to_vec()),
        delta: delta.map(|x| x.as_slice().to_vec()),
        random_effects,
    };
    Ok((dataset, truth))
}

pub const SIM_PRINCIPAL: f64 = 200_000.0;
pub const SIM_RATE_PERCENT: f64 = 4.0;
pub const SIM_TERM: u32 = 360;

/// Loan records for the CSV pair. Synthetic covariates `z1`, `z2` are stored
/// in the `cltv` and `dti` columns; the remaining fields are fixed.
pub fn to_loan_records(dataset: &PanelDataset) -> Vec<LoanRecord> {
    let i = SIM_RATE_PERCENT / 1200.0;
    let zk = |name: &str| dataset.covariate_index(name);
    let (k1, k2) = (zk("z1"), zk("z2"));
    dataset
        .loans
        .iter()
        .map(|l| LoanRecord {
            loan_id: l.loan_id.clone(),
            area: l.area,
            orig_date: "2015-01".into(),
            term: SIM_TERM,
            int_rt: SIM_RATE_PERCENT,
            orig_upb: SIM_PRINCIPAL,
            cltv: k1.map_or(0.0, |k| l.covariates[k]),
            cnt_units: 1,
            dti: k2.map_or(0.0, |k| l.covariates[k]),
            loan_purpose: LoanPurpose::Purchase,
            cnt_borr: 1,
            balances: l
                .y
                .iter()
                .map(|&y| balance_from_outcome(SIM_PRINCIPAL, y, i, SIM_TERM, dataset.t_study))
                .collect(),
            prepaid: l.prepaid,
        })
        .collect()
}

/// Moran's I of `values` (one per area) under binary adjacency weights.
pub fn morans_i(values: &[f64], graph: &AdjacencyGraph) -> Result<f64> {
    let n = graph.n_areas();
    if values.len() != n {
        return Err(StjmError::InvalidDimension(format!("{} values for {n} areas", values.len())));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|x| x - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom == 0.0 || graph.n_pairs() == 0 {
        return Err(StjmError::ZeroVariance("Moran's I undefined for constant values or no neighbours".into()));
    }
    let w_sum = 2.0 * graph.n_pairs() as f64;
    let num: f64 = graph.pairs().map(|(a, b)| 2.0 * dev[a - 1] * dev[b - 1]).sum();
    Ok(n as f64 / w_sum * num / denom)
}

/// Fraction of loans prepaid in each area; areas without loans get the overall rate.
pub fn area_event_rates(dataset: &PanelDataset, n_areas: usize) -> Vec<f64> {
    let mut count = vec![0usize; n_areas];
    let mut events = vec![0usize; n_areas];
    for l in &dataset.loans {
        count[l.area - 1] += 1;
        events[l.area - 1] += usize::from(l.prepaid);
    }
    let overall = events.iter().sum::<usize>() as f64 / dataset.n_loans().max(1) as f64;
    count
        .iter()
        .zip(&events)
        .map(|(&c, &e)| if c == 0 { overall } else { e as f64 / c as f64 })
        .collect()
}

/// Number of loans at risk (`t_i > t`) at each time.
pub fn at_risk_profile(dataset: &PanelDataset, times: &[usize]) -> Vec<usize> {
    times.iter().map(|&t| dataset.at_risk(t)).collect()
}

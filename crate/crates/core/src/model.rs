//! The spatio-temporal joint model as a latent Gaussian model.
//!
//! Latent layout: per-loan `(U₀ᵢ, U₁ᵢ)` pairs first, then the global part
//! `β₀₁, β₁₁, β₂ (p), ν₀, v (T), u (A), δ (T·A)`. The linear predictors are
//!
//! ```text
//! η_Y(i,s) = β₀₁ + U₀ᵢ + (β₁₁ + U₁ᵢ) s
//! η_X(i,s) = ν₀ + v_s [+ u_a] [+ δ_{a,s}] + z_iᵀβ₂ + λ (U₀ᵢ + U₁ᵢ s)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::PanelDataset;
use crate::error::{Result, StjmError};
use crate::gmrf::{
    build_constraints, build_icar_structure, build_interaction_structure, build_rw2_structure, interaction_index,
    ConstraintSet, Variant,
};
use crate::graph::AdjacencyGraph;
use crate::lgm::{LatentModel, LgmInstance, LgmPattern, ObsRow, Response};
use crate::sparse::SparseSymmetric;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Hyperparameters on their natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tau_y: f64,
    pub tau_u0: f64,
    pub tau_u1: f64,
    pub rho01: f64,
    pub lambda: f64,
    pub tau_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_delta: Option<f64>,
}

impl HyperParams {
    /// Names of the internal coordinates for `variant`, in order.
    pub fn names(variant: Variant) -> Vec<&'static str> {
        let mut n = vec!["tau_Y", "tau_U0", "tau_U1", "rho_01", "lambda", "tau_v"];
        if variant.has_spatial() {
            n.push("tau_u");
        }
        if variant.has_interaction() {
            n.push("tau_delta");
        }
        n
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let bad = |what: &str, v: f64| Err(StjmError::InvalidHyperparameter(format!("{what} = {v}")));
        for (name, v) in [
            ("tau_Y", self.tau_y),
            ("tau_U0", self.tau_u0),
            ("tau_U1", self.tau_u1),
            ("tau_v", self.tau_v),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        if !(self.rho01.abs() < 1.0) {
            return bad("rho_01", self.rho01);
        }
        if !self.lambda.is_finite() {
            return bad("lambda", self.lambda);
        }
        let need = |name: &str, v: Option<f64>, required: bool| -> Result<()> {
            match (v, required) {
                (Some(x), true) if x > 0.0 && x.is_finite() => Ok(()),
                (Some(x), true) => Err(StjmError::InvalidHyperparameter(format!("{name} = {x}"))),
                (None, true) => Err(StjmError::InvalidHyperparameter(format!("{name} required for {variant}"))),
                (_, false) => Ok(()),
            }
        };
        need("tau_u", self.tau_u, variant.has_spatial())?;
        need("tau_delta", self.tau_delta, variant.has_interaction())
    }

    /// Covariance of `(U₀, U₁)` from marginal precisions and correlation.
    pub fn cov_u(&self) -> Matrix2<f64> {
        let off = self.rho01 / (self.tau_u0 * self.tau_u1).sqrt();
        Matrix2::new(1.0 / self.tau_u0, off, off, 1.0 / self.tau_u1)
    }

    /// `Q_U`, the inverse of [`HyperParams::cov_u`].
    pub fn q_u(&self) -> Result<Matrix2<f64>> {
        let r2 = 1.0 - self.rho01 * self.rho01;
        if !(self.tau_u0 > 0.0 && self.tau_u1 > 0.0 && r2 > 0.0) {
            return Err(StjmError::InvalidHyperparameter(format!(
                "Q_U not positive definite (tau_U0={}, tau_U1={}, rho_01={})",
                self.tau_u0, self.tau_u1, self.rho01
            )));
        }
        let off = -self.rho01 * (self.tau_u0 * self.tau_u1).sqrt() / r2;
        Ok(Matrix2::new(self.tau_u0 / r2, off, off, self.tau_u1 / r2))
    }

    /// Log-precisions, Fisher-transformed correlation and identity for λ.
    pub fn to_internal(&self) -> Vec<f64> {
        let mut v = vec![
            self.tau_y.ln(),
            self.tau_u0.ln(),
            self.tau_u1.ln(),
            self.rho01.atanh(),
            self.lambda,
            self.tau_v.ln(),
        ];
        v.extend(self.tau_u.map(f64::ln));
        v.extend(self.tau_delta.map(f64::ln));
        v
    }

    pub fn from_internal(variant: Variant, theta: &[f64]) -> Result<Self> {
        let expected = Self::names(variant).len();
        if theta.len() != expected {
            return Err(StjmError::InvalidHyperparameter(format!(
                "{variant} has {expected} hyperparameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(StjmError::InvalidHyperparameter(format!("non-finite internal value in {theta:?}")));
        }
        let h = Self {
            tau_y: theta[0].exp(),
            tau_u0: theta[1].exp(),
            tau_u1: theta[2].exp(),
            rho01: theta[3].tanh(),
            lambda: theta[4],
            tau_v: theta[5].exp(),
            tau_u: variant.has_spatial().then(|| theta[6].exp()),
            tau_delta: variant.has_interaction().then(|| theta[7].exp()),
        };
        h.validate(variant)?;
        Ok(h)
    }
}

/// Maps an internal coordinate to its natural scale.
pub fn internal_to_natural(name: &str, x: f64) -> f64 {
    match name {
        "rho_01" => x.tanh(),
        "lambda" => x,
        _ => x.exp(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    /// Log-density of `log τ` when `τ ~ Gamma(shape, rate)`.
    pub fn log_density_log_scale(&self, log_tau: f64) -> f64 {
        let tau = log_tau.exp();
        self.shape * self.rate.ln() - ln_gamma(self.shape) + self.shape * log_tau - self.rate * tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * LN_2PI - self.sd.ln() - 0.5 * z * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperPriorSettings {
    /// Prior for every precision without an override.
    pub precision: GammaPrior,
    /// Per-precision overrides keyed by name (`tau_Y`, `tau_U0`, ...).
    pub overrides: BTreeMap<String, GammaPrior>,
    pub lambda: NormalPrior,
    /// Prior on `atanh(rho_01)`.
    pub rho_fisher: NormalPrior,
}

impl Default for HyperPriorSettings {
    fn default() -> Self {
        Self {
            precision: GammaPrior { shape: 1.0, rate: 5e-5 },
            overrides: BTreeMap::new(),
            lambda: NormalPrior { mean: 0.0, sd: 10.0 },
            rho_fisher: NormalPrior { mean: 0.0, sd: 1.0 },
        }
    }
}

impl HyperPriorSettings {
    fn precision_prior(&self, name: &str) -> GammaPrior {
        self.overrides.get(name).copied().unwrap_or(self.precision)
    }
}

/// Log hyper-prior on the internal scale, Jacobians of the transforms included.
pub fn log_hyper_prior(variant: Variant, theta: &[f64], settings: &HyperPriorSettings) -> f64 {
    HyperParams::names(variant)
        .iter()
        .zip(theta)
        .map(|(&name, &x)| match name {
            "rho_01" => settings.rho_fisher.log_density(x),
            "lambda" => settings.lambda.log_density(x),
            _ => settings.precision_prior(name).log_density_log_scale(x),
        })
        .sum()
}

/// Declarative model configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Fixed prior precision of `β₁`, `β₂` and `ν₀`.
    pub tau_f: f64,
    /// Survival covariates taken from the dataset, in order.
    pub covariates: Vec<String>,
    pub priors: HyperPriorSettings,
    /// Starting point for the hyperparameter search; derived from the data when absent.
    pub initial: Option<HyperParams>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::M1,
            tau_f: 0.001,
            covariates: Vec::new(),
            priors: HyperPriorSettings::default(),
            initial: None,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| StjmError::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| StjmError::Config(e.to_string()))
    }
}

/// A named contiguous range of the latent vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub n_loans: usize,
    pub n_covariates: usize,
    pub t: usize,
    /// Zero when the variant has no spatial terms.
    pub n_areas: usize,
    pub blocks: Vec<LatentBlock>,
}

impl LatentLayout {
    pub fn new(n_loans: usize, n_covariates: usize, t: usize, n_areas: usize, variant: Variant) -> Self {
        let mut sizes = vec![("U", 2 * n_loans), ("beta1", 2), ("beta2", n_covariates), ("nu0", 1), ("v", t)];
        if variant.has_spatial() {
            sizes.push(("u", n_areas));
        }
        if variant.has_interaction() {
            sizes.push(("delta", t * n_areas));
        }
        let mut offset = 0;
        let blocks = sizes
            .into_iter()
            .map(|(name, len)| {
                let b = LatentBlock {
                    name: name.to_string(),
                    offset,
                    len,
                };
                offset += len;
                b
            })
            .collect();
        Self {
            n_loans,
            n_covariates,
            t,
            n_areas: if variant.has_spatial() { n_areas } else { 0 },
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn block(&self, name: &str) -> Option<&LatentBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn offset(&self, name: &str) -> usize {
        self.block(name).unwrap_or_else(|| panic!("layout has no `{name}` block")).offset
    }

    pub fn global_offset(&self) -> usize {
        2 * self.n_loans
    }

    pub fn u0(&self, i: usize) -> usize {
        2 * i
    }

    pub fn u1(&self, i: usize) -> usize {
        2 * i + 1
    }

    pub fn beta01(&self) -> usize {
        self.offset("beta1")
    }

    pub fn beta11(&self) -> usize {
        self.offset("beta1") + 1
    }

    pub fn beta2(&self, k: usize) -> usize {
        self.offset("beta2") + k
    }

    pub fn nu0(&self) -> usize {
        self.offset("nu0")
    }

    /// `v_s`, 1-based `s`.
    pub fn v(&self, s: usize) -> usize {
        self.offset("v") + s - 1
    }

    /// `u_a`, 1-based `a`.
    pub fn u_area(&self, a: usize) -> Option<usize> {
        self.block("u").map(|b| b.offset + a - 1)
    }

    /// `δ_{a,s}`, 1-based `a` and `s`.
    pub fn delta(&self, a: usize, s: usize) -> Option<usize> {
        self.block("delta").map(|b| b.offset + interaction_index(a, s, self.n_areas))
    }
}

/// The assembled joint model for one variant and dataset.
#[derive(Debug, Clone)]
pub struct ModelDefinition {
    pub variant: Variant,
    pub config: ModelConfig,
    pub layout: LatentLayout,
    pub dataset: PanelDataset,
    pub graph: Option<AdjacencyGraph>,
    covariate_columns: Vec<usize>,
    rv: SparseSymmetric,
    ru: Option<SparseSymmetric>,
    rdelta: Option<SparseSymmetric>,
    ranks: [usize; 3],
    /// Constraints over the full latent vector.
    pub constraints: ConstraintSet,
    pattern: LgmPattern,
    /// Index of loan `i`'s first row inside the pattern.
    row_start: Vec<usize>,
}

/// Added to the diagonal of the intrinsic blocks (`v`, `u`, `δ`) of the
/// working precision. Their common null directions are removed by the
/// sum-to-zero constraints, so the value only keeps the factorisation
/// well-posed.
pub const INTRINSIC_JITTER: f64 = 1e-6;

/// Assembles the latent Gaussian model for `variant`.
pub fn build_model(
    dataset: PanelDataset,
    graph: Option<AdjacencyGraph>,
    variant: Variant,
    mut config: ModelConfig,
) -> Result<ModelDefinition> {
    config.variant = variant;
    if dataset.n_loans() == 0 {
        return Err(StjmError::Model("dataset has no loans".into()));
    }
    let t = dataset.t_study;
    if t < 3 {
        return Err(StjmError::Model(format!("study length T = {t} < 3")));
    }
    if !(config.tau_f > 0.0) {
        return Err(StjmError::Config(format!("tau_f must be positive, got {}", config.tau_f)));
    }
    let graph = if variant.has_spatial() {
        let g = graph.ok_or_else(|| {
            StjmError::Config(format!("variant {variant} needs an adjacency graph (none was supplied)"))
        })?;
        if let Some(loan) = dataset.loans.iter().find(|l| l.area > g.n_areas()) {
            return Err(StjmError::Model(format!(
                "loan {} has area {} but the graph covers areas 1..={}",
                loan.loan_id,
                loan.area,
                g.n_areas()
            )));
        }
        Some(g)
    } else {
        graph
    };
    let covariate_columns = config
        .covariates
        .iter()
        .map(|c| {
            dataset
                .covariate_index(c)
                .ok_or_else(|| StjmError::Config(format!("covariate `{c}` not in dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_areas = graph.as_ref().map_or(0, AdjacencyGraph::n_areas);
    let layout = LatentLayout::new(dataset.n_loans(), covariate_columns.len(), t, n_areas, variant);

    let rv = build_rw2_structure(t)?;
    let (ru, rdelta, n_comp) = match (&graph, variant.has_spatial()) {
        (Some(g), true) => {
            let ru = build_icar_structure(g);
            let rd = variant.has_interaction().then(|| build_interaction_structure(&rv, &ru));
            (Some(ru), rd, g.n_components())
        }
        _ => (None, None, 0),
    };
    let ranks = [
        t - 2,
        if ru.is_some() { n_areas - n_comp } else { 0 },
        if rdelta.is_some() { (t - 2) * (n_areas - n_comp) } else { 0 },
    ];

    let re = build_constraints(t, n_areas.max(1), variant)?;
    let g_dim = layout.dim() - layout.global_offset();
    let re_offset = layout.v(1) - layout.global_offset();
    let global_constraints = re.embed(re_offset, g_dim);
    let constraints = global_constraints.embed(layout.global_offset(), layout.dim());

    let mut rows = Vec::with_capacity(2 * dataset.n_rows());
    let mut row_start = Vec::with_capacity(dataset.n_loans());
    let go = layout.global_offset();
    for (i, loan) in dataset.loans.iter().enumerate() {
        row_start.push(rows.len());
        for s in 1..=loan.duration() {
            let sf = s as f64;
            rows.push(ObsRow {
                response: Response::Gaussian(loan.y[s - 1]),
                block: Some(i),
                local: [1.0, sf],
                global: vec![(layout.beta01() - go, 1.0), (layout.beta11() - go, sf)],
            });
            let mut global = vec![(layout.nu0() - go, 1.0)];
            for (k, &c) in covariate_columns.iter().enumerate() {
                global.push((layout.beta2(k) - go, loan.covariates[c]));
            }
            global.push((layout.v(s) - go, 1.0));
            if let Some(ua) = layout.u_area(loan.area) {
                global.push((ua - go, 1.0));
            }
            if let Some(d) = layout.delta(loan.area, s) {
                global.push((d - go, 1.0));
            }
            rows.push(ObsRow {
                response: Response::Bernoulli(loan.event_at(s)),
                block: Some(i),
                local: [1.0, sf],
                global,
            });
        }
    }
    let pattern = LgmPattern::new(dataset.n_loans(), g_dim, rows, global_constraints)?;
    Ok(ModelDefinition {
        variant,
        config,
        layout,
        dataset,
        graph,
        covariate_columns,
        rv,
        ru,
        rdelta,
        ranks,
        constraints,
        pattern,
        row_start,
    })
}

impl ModelDefinition {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_hyper(&self) -> usize {
        HyperParams::names(self.variant).len()
    }

    /// Survival covariate values of loan `i` in model order.
    pub fn covariates_of(&self, i: usize) -> Vec<f64> {
        let loan = &self.dataset.loans[i];
        self.covariate_columns.iter().map(|&c| loan.covariates[c]).collect()
    }

    /// Pattern row index of `(loan i, period s)` for the Gaussian row; the
    /// Bernoulli row follows it.
    pub fn row_index(&self, i: usize, s: usize) -> usize {
        self.row_start[i] + 2 * (s - 1)
    }

    /// Sparse rows of the longitudinal and survival predictors over the full
    /// latent vector.
    #[allow(clippy::type_complexity)]
    pub fn design_rows(&self, i: usize, s: usize, lambda: f64) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
        let loan = self
            .dataset
            .loans
            .get(i)
            .ok_or_else(|| StjmError::Model(format!("loan index {i} out of range")))?;
        if s == 0 || s > loan.duration() {
            return Err(StjmError::Model(format!(
                "period {s} outside 1..={} for loan {}",
                loan.duration(),
                loan.loan_id
            )));
        }
        let l = &self.layout;
        let sf = s as f64;
        let row_y = vec![(l.u0(i), 1.0), (l.u1(i), sf), (l.beta01(), 1.0), (l.beta11(), sf)];
        let mut row_x = vec![(l.u0(i), lambda), (l.u1(i), lambda * sf), (l.nu0(), 1.0)];
        for (k, z) in self.covariates_of(i).into_iter().enumerate() {
            row_x.push((l.beta2(k), z));
        }
        row_x.push((l.v(s), 1.0));
        if let Some(ua) = l.u_area(loan.area) {
            row_x.push((ua, 1.0));
        }
        if let Some(d) = l.delta(loan.area, s) {
            row_x.push((d, 1.0));
        }
        Ok((row_y, row_x))
    }

    fn global_prior(&self, h: &HyperParams) -> DMatrix<f64> {
        let l = &self.layout;
        let go = l.global_offset();
        let g = l.dim() - go;
        let mut q = DMatrix::zeros(g, g);
        for k in l.beta01()..=l.nu0() {
            q[(k - go, k - go)] = self.config.tau_f;
        }
        self.rv.add_to_dense(&mut q, l.v(1) - go, h.tau_v);
        if let (Some(ru), Some(tau)) = (&self.ru, h.tau_u) {
            ru.add_to_dense(&mut q, l.u_area(1).expect("spatial layout") - go, tau);
        }
        if let (Some(rd), Some(tau)) = (&self.rdelta, h.tau_delta) {
            rd.add_to_dense(&mut q, l.delta(1, 1).expect("interaction layout") - go, tau);
        }
        for k in l.v(1) - go..g {
            q[(k, k)] += INTRINSIC_JITTER;
        }
        q
    }

    /// Block-diagonal prior precision of the full latent vector.
    pub fn assemble_precision(&self, h: &HyperParams) -> Result<SparseSymmetric> {
        h.validate(self.variant)?;
        let qu = h.q_u()?;
        let l = &self.layout;
        let mut trip = Vec::new();
        for i in 0..l.n_loans {
            trip.push((l.u0(i), l.u0(i), qu[(0, 0)]));
            trip.push((l.u0(i), l.u1(i), qu[(0, 1)]));
            trip.push((l.u1(i), l.u1(i), qu[(1, 1)]));
        }
        for k in l.beta01()..=l.nu0() {
            trip.push((k, k, self.config.tau_f));
        }
        let mut push = |r: &SparseSymmetric, offset: usize, tau: f64| {
            trip.extend(r.upper_entries().iter().map(|&(i, j, v)| (offset + i, offset + j, tau * v)));
        };
        push(&self.rv, l.v(1), h.tau_v);
        if let (Some(ru), Some(tau)) = (&self.ru, h.tau_u) {
            push(ru, l.u_area(1).expect("spatial layout"), tau);
        }
        if let (Some(rd), Some(tau)) = (&self.rdelta, h.tau_delta) {
            push(rd, l.delta(1, 1).expect("interaction layout"), tau);
        }
        SparseSymmetric::from_triplets_structural(l.dim(), trip)
    }

    /// Ranks of the structure matrices of `v`, `u` and `δ`.
    pub fn structure_ranks(&self) -> [usize; 3] {
        self.ranks
    }

    /// Data-driven starting point: per-loan least-squares lines give `τ_Y`
    /// and the random-effect precisions; the remaining values are neutral.
    pub fn default_initial(&self) -> HyperParams {
        let mut resid = Vec::new();
        let mut icpt = Vec::new();
        let mut slope = Vec::new();
        for loan in &self.dataset.loans {
            let n = loan.duration();
            if n < 3 {
                continue;
            }
            let s: Vec<f64> = (1..=n).map(|k| k as f64).collect();
            let ms = s.iter().sum::<f64>() / n as f64;
            let my = loan.y.iter().sum::<f64>() / n as f64;
            let sxx: f64 = s.iter().map(|x| (x - ms).powi(2)).sum();
            let sxy: f64 = s.iter().zip(&loan.y).map(|(x, y)| (x - ms) * (y - my)).sum();
            let b = sxy / sxx;
            let a = my - b * ms;
            for (x, y) in s.iter().zip(&loan.y) {
                resid.push(y - a - b * x);
            }
            icpt.push(a);
            slope.push(b);
        }
        let var = |v: &[f64], dof: usize| -> Option<f64> {
            if v.len() <= dof {
                return None;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - dof) as f64;
            (s2 > 1e-12 && s2.is_finite()).then_some(s2)
        };
        let clamp = |p: f64| p.clamp(1e-3, 1e6);
        let tau_y = var(&resid, 2).map_or(1.0, |v| clamp(1.0 / v));
        let tau_u0 = var(&icpt, 1).map_or(1.0, |v| clamp(1.0 / v));
        let tau_u1 = var(&slope, 1).map_or(100.0, |v| clamp(1.0 / v));
        HyperParams {
            tau_y,
            tau_u0,
            tau_u1,
            rho01: 0.0,
            lambda: 0.0,
            tau_v: 10.0,
            tau_u: self.variant.has_spatial().then_some(10.0),
            tau_delta: self.variant.has_interaction().then_some(10.0),
        }
    }

    pub fn hyper_from_internal(&self, theta: &[f64]) -> Result<HyperParams> {
        HyperParams::from_internal(self.variant, theta)
    }

    /// Names of every latent coordinate.
    pub fn latent_coordinate_names(&self) -> Vec<String> {
        let l = &self.layout;
        let mut names = Vec::with_capacity(l.dim());
        for loan in &self.dataset.loans {
            names.push(format!("U0[{}]", loan.loan_id));
            names.push(format!("U1[{}]", loan.loan_id));
        }
        names.push("beta01".into());
        names.push("beta11".into());
        for c in &self.config.covariates {
            names.push(format!("beta2[{c}]"));
        }
        names.push("nu0".into());
        names.extend((1..=l.t).map(|s| format!("v[{s}]")));
        if self.variant.has_spatial() {
            names.extend((1..=l.n_areas).map(|a| format!("u[{a}]")));
        }
        if self.variant.has_interaction() {
            for s in 1..=l.t {
                names.extend((1..=l.n_areas).map(|a| format!("delta[{a},{s}]")));
            }
        }
        names
    }
}

impl LatentModel for ModelDefinition {
    fn pattern(&self) -> &LgmPattern {
        &self.pattern
    }

    fn hyper_names(&self) -> Vec<String> {
        HyperParams::names(self.variant).into_iter().map(String::from).collect()
    }

    fn instance(&self, theta: &[f64]) -> Result<LgmInstance> {
        let h = self.hyper_from_internal(theta)?;
        let qu = h.q_u()?;
        let l = &self.layout;
        let n_fixed = l.nu0() - l.beta01() + 1;
        let [rv, ru, rd] = self.ranks;
        let rank = 2 * l.n_loans + n_fixed + rv + ru + rd;
        let log_det_qu = h.tau_u0.ln() + h.tau_u1.ln() - (1.0 - h.rho01 * h.rho01).ln();
        let mut log_norm = -0.5 * rank as f64 * LN_2PI
            + 0.5 * l.n_loans as f64 * log_det_qu
            + 0.5 * n_fixed as f64 * self.config.tau_f.ln()
            + 0.5 * rv as f64 * h.tau_v.ln();
        if let Some(t) = h.tau_u {
            log_norm += 0.5 * ru as f64 * t.ln();
        }
        if let Some(t) = h.tau_delta {
            log_norm += 0.5 * rd as f64 * t.ln();
        }
        Ok(LgmInstance {
            local_prior: qu,
            global_prior: self.global_prior(&h),
            gaussian_precision: h.tau_y,
            bernoulli_local_scale: h.lambda,
            log_prior_norm: log_norm,
        })
    }

    fn log_hyper_prior(&self, theta: &[f64]) -> f64 {
        log_hyper_prior(self.variant, theta, &self.config.priors)
    }

    fn initial_theta(&self) -> Vec<f64> {
        self.config.initial.unwrap_or_else(|| self.default_initial()).to_internal()
    }

    fn hyper_to_user(&self, k: usize, internal: f64) -> f64 {
        internal_to_natural(HyperParams::names(self.variant)[k], internal)
    }

    fn latent_names(&self) -> Vec<String> {
        self.latent_coordinate_names()
    }
}

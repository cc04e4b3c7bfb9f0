//! Latent Gaussian model machinery shared by the Laplace engine, the MCMC
//! sampler and the cross-validation code.
//!
//! The latent vector is laid out as `n_blocks` local 2-vectors (per-loan
//! random effects) followed by a dense global part. Every observation row
//! touches at most one local block, so the posterior precision has arrowhead
//! form
//!
//! ```text
//! Q = [ D   B ]      D = blockdiag(D_1, …, D_N),  D_i ∈ R^{2×2}
//!     [ Bᵀ  C ]      C ∈ R^{G×G}
//! ```
//!
//! and is factorised by eliminating the local blocks into the Schur complement
//! `S = C − Bᵀ D⁻¹ B`. Linear constraints act on the global part only.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Result, StjmError};
use crate::gmrf::ConstraintSet;
use crate::linalg::DenseCholesky;

/// Observed response of one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    Gaussian(f64),
    Bernoulli(bool),
}

/// One observation row: `η = local · U_block (· scale) + Σ coef · μ_global`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub response: Response,
    pub block: Option<usize>,
    pub local: [f64; 2],
    pub global: Vec<(usize, f64)>,
}

/// θ-independent structure of a latent Gaussian model.
#[derive(Debug, Clone)]
pub struct LgmPattern {
    n_blocks: usize,
    global_dim: usize,
    rows: Vec<ObsRow>,
    block_rows: Vec<Range<usize>>,
    free_rows: Range<usize>,
    block_cols: Vec<Vec<usize>>,
    /// For rows attached to a block: position of each global entry in `block_cols`.
    row_pos: Vec<Vec<u32>>,
    constraints: ConstraintSet,
    log_det_aat: f64,
}

impl LgmPattern {
    /// Groups rows by block (stable), precomputes the global columns each
    /// block couples to, and validates indices. `constraints` act on the
    /// global part.
    pub fn new(n_blocks: usize, global_dim: usize, mut rows: Vec<ObsRow>, constraints: ConstraintSet) -> Result<Self> {
        if !constraints.is_empty() && constraints.dim() != global_dim {
            return Err(StjmError::Model(format!(
                "constraints have {} columns, global part has {global_dim}",
                constraints.dim()
            )));
        }
        for r in &rows {
            if let Some(b) = r.block {
                if b >= n_blocks {
                    return Err(StjmError::Model(format!("row references block {b} of {n_blocks}")));
                }
            }
            if let Some(&(c, _)) = r.global.iter().find(|(c, _)| *c >= global_dim) {
                return Err(StjmError::Model(format!("row references global column {c} of {global_dim}")));
            }
        }
        rows.sort_by_key(|r| r.block.unwrap_or(usize::MAX));
        let mut block_rows = vec![0..0; n_blocks];
        let mut start = 0;
        while start < rows.len() {
            let Some(b) = rows[start].block else { break };
            let mut end = start;
            while end < rows.len() && rows[end].block == Some(b) {
                end += 1;
            }
            block_rows[b] = start..end;
            start = end;
        }
        let free_rows = start..rows.len();
        let mut block_cols = Vec::with_capacity(n_blocks);
        let mut row_pos = vec![Vec::new(); rows.len()];
        for range in &block_rows {
            let mut cols: Vec<usize> = rows[range.clone()]
                .iter()
                .flat_map(|r| r.global.iter().map(|(c, _)| *c))
                .collect();
            cols.sort_unstable();
            cols.dedup();
            for j in range.clone() {
                row_pos[j] = rows[j]
                    .global
                    .iter()
                    .map(|(c, _)| cols.binary_search(c).expect("column collected") as u32)
                    .collect();
            }
            block_cols.push(cols);
        }
        let log_det_aat = if constraints.is_empty() {
            0.0
        } else {
            DenseCholesky::new(&(&constraints.rows * constraints.rows.transpose()))
                .map_err(|_| StjmError::Model("constraint rows are linearly dependent".into()))?
                .log_det()
        };
        Ok(Self {
            log_det_aat,
            n_blocks,
            global_dim,
            rows,
            block_rows,
            free_rows,
            block_cols,
            row_pos,
            constraints,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn dim(&self) -> usize {
        2 * self.n_blocks + self.global_dim
    }

    pub fn global_offset(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn rows(&self) -> &[ObsRow] {
        &self.rows
    }

    pub fn block_rows(&self, b: usize) -> Range<usize> {
        self.block_rows[b].clone()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Constraints expressed over the full latent vector.
    pub fn full_constraints(&self) -> ConstraintSet {
        self.constraints.embed(self.global_offset(), self.dim())
    }

    /// Local coefficient of a row with the Bernoulli scale applied.
    #[inline]
    fn local_coefs(&self, row: &ObsRow, inst: &LgmInstance) -> [f64; 2] {
        match row.response {
            Response::Gaussian(_) => row.local,
            Response::Bernoulli(_) => [row.local[0] * inst.bernoulli_local_scale, row.local[1] * inst.bernoulli_local_scale],
        }
    }

    /// Linear predictor of every row.
    pub fn linear_predictors(&self, inst: &LgmInstance, mu: &[f64]) -> Vec<f64> {
        let go = self.global_offset();
        self.rows
            .iter()
            .map(|r| {
                let mut eta: f64 = r.global.iter().map(|&(c, v)| v * mu[go + c]).sum();
                if let Some(b) = r.block {
                    let l = self.local_coefs(r, inst);
                    eta += l[0] * mu[2 * b] + l[1] * mu[2 * b + 1];
                }
                eta
            })
            .collect()
    }

    pub fn log_likelihood(&self, inst: &LgmInstance, mu: &[f64]) -> f64 {
        let eta = self.linear_predictors(inst, mu);
        self.rows
            .iter()
            .zip(&eta)
            .map(|(r, &e)| row_log_likelihood(r.response, e, inst.gaussian_precision))
            .sum()
    }

    /// `Σ_j r_j a_j`, where `a_j` is the design row of observation `j`.
    pub fn transpose_apply(&self, inst: &LgmInstance, r: &[f64]) -> Vec<f64> {
        let go = self.global_offset();
        let mut out = vec![0.0; self.dim()];
        for (row, &rj) in self.rows.iter().zip(r) {
            if rj == 0.0 {
                continue;
            }
            if let Some(b) = row.block {
                let l = self.local_coefs(row, inst);
                out[2 * b] += rj * l[0];
                out[2 * b + 1] += rj * l[1];
            }
            for &(c, v) in &row.global {
                out[go + c] += rj * v;
            }
        }
        out
    }

    /// `log |A Aᵀ|` of the global constraints, zero without constraints.
    pub fn log_det_aat(&self) -> f64 {
        self.log_det_aat
    }

    /// `μᵀ Q_prior μ`.
    pub fn prior_quad(&self, inst: &LgmInstance, mu: &[f64]) -> f64 {
        let mut q = 0.0;
        for b in 0..self.n_blocks {
            let u = Vector2::new(mu[2 * b], mu[2 * b + 1]);
            q += u.dot(&(inst.local_prior * u));
        }
        let g = DVector::from_column_slice(&mu[self.global_offset()..]);
        q + g.dot(&(&inst.global_prior * &g))
    }

    /// `log p(μ | θ)` with the model-supplied normaliser.
    pub fn log_prior(&self, inst: &LgmInstance, mu: &[f64]) -> f64 {
        inst.log_prior_norm - 0.5 * self.prior_quad(inst, mu)
    }

    /// Assembles `Q_prior + Σ_j w_j a_j a_jᵀ` and factorises it.
    pub fn factor(&self, inst: &LgmInstance, weights: &[f64]) -> Result<ArrowheadFactor> {
        let g = self.global_dim;
        let mut s = inst.global_prior.clone();
        let mut blocks = Vec::with_capacity(self.n_blocks);
        let mut log_det = 0.0;
        for b in 0..self.n_blocks {
            let cols = &self.block_cols[b];
            let k = cols.len();
            let mut d = inst.local_prior;
            let mut bm = vec![[0.0f64; 2]; k];
            for j in self.block_rows[b].clone() {
                let w = weights[j];
                if w == 0.0 {
                    continue;
                }
                let row = &self.rows[j];
                let l = self.local_coefs(row, inst);
                d[(0, 0)] += w * l[0] * l[0];
                d[(0, 1)] += w * l[0] * l[1];
                d[(1, 1)] += w * l[1] * l[1];
                for (e, &(c, v)) in row.global.iter().enumerate() {
                    let p = self.row_pos[j][e] as usize;
                    bm[p][0] += w * l[0] * v;
                    bm[p][1] += w * l[1] * v;
                    for &(c2, v2) in &row.global {
                        s[(c, c2)] += w * v * v2;
                    }
                }
            }
            d[(1, 0)] = d[(0, 1)];
            let det = d[(0, 0)] * d[(1, 1)] - d[(0, 1)] * d[(0, 1)];
            if !(d[(0, 0)] > 0.0) || !(det > 0.0) {
                return Err(StjmError::NotPositiveDefinite { pivot: 2 * b + usize::from(d[(0, 0)] > 0.0) });
            }
            log_det += det.ln();
            let l00 = d[(0, 0)].sqrt();
            let l10 = d[(1, 0)] / l00;
            let l11 = (d[(1, 1)] - l10 * l10).sqrt();
            let chol = Matrix2::new(l00, 0.0, l10, l11);
            let dinv = Matrix2::new(d[(1, 1)], -d[(0, 1)], -d[(0, 1)], d[(0, 0)]) / det;
            // S -= Bᵀ D⁻¹ B over the block's columns.
            let m: Vec<[f64; 2]> = bm
                .iter()
                .map(|c| {
                    [
                        dinv[(0, 0)] * c[0] + dinv[(0, 1)] * c[1],
                        dinv[(1, 0)] * c[0] + dinv[(1, 1)] * c[1],
                    ]
                })
                .collect();
            for (a, &ca) in cols.iter().enumerate() {
                let ba = bm[a];
                for (bb, &cb) in cols.iter().enumerate() {
                    s[(ca, cb)] -= ba[0] * m[bb][0] + ba[1] * m[bb][1];
                }
            }
            blocks.push(BlockFactor { chol, dinv, b: bm });
        }
        for j in self.free_rows.clone() {
            let w = weights[j];
            if w == 0.0 {
                continue;
            }
            let row = &self.rows[j];
            for &(c, v) in &row.global {
                for &(c2, v2) in &row.global {
                    s[(c, c2)] += w * v * v2;
                }
            }
        }
        let schur = DenseCholesky::new(&s).map_err(|e| match e {
            StjmError::NotPositiveDefinite { pivot } => StjmError::NotPositiveDefinite {
                pivot: pivot + 2 * self.n_blocks,
            },
            other => other,
        })?;
        log_det += schur.log_det();
        debug_assert_eq!(schur.dim(), g);
        Ok(ArrowheadFactor {
            blocks,
            schur,
            log_det,
        })
    }

    fn gather<'a>(&'a self, b: usize, global: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.block_cols[b].iter().map(move |&c| global[c])
    }
}

/// Log-likelihood contribution of one row at linear predictor `eta`.
#[inline]
pub fn row_log_likelihood(response: Response, eta: f64, gaussian_precision: f64) -> f64 {
    match response {
        Response::Gaussian(y) => {
            0.5 * (gaussian_precision / (2.0 * std::f64::consts::PI)).ln() - 0.5 * gaussian_precision * (y - eta).powi(2)
        }
        Response::Bernoulli(x) => bernoulli_log_pmf(x, eta),
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log P(X = x)` for `X ~ Bernoulli(logistic(eta))`.
#[inline]
pub fn bernoulli_log_pmf(x: bool, eta: f64) -> f64 {
    if x {
        -log1p_exp(-eta)
    } else {
        -log1p_exp(eta)
    }
}

/// Gradient and negative second derivative of a row's log-likelihood in `eta`.
#[inline]
pub fn row_derivatives(response: Response, eta: f64, gaussian_precision: f64) -> (f64, f64) {
    match response {
        Response::Gaussian(y) => (gaussian_precision * (y - eta), gaussian_precision),
        Response::Bernoulli(x) => {
            let p = logistic(eta);
            (f64::from(u8::from(x)) - p, p * (1.0 - p))
        }
    }
}

/// θ-specific ingredients of the latent Gaussian model.
#[derive(Debug, Clone)]
pub struct LgmInstance {
    pub local_prior: Matrix2<f64>,
    pub global_prior: DMatrix<f64>,
    pub gaussian_precision: f64,
    /// Multiplies the local coefficients of Bernoulli rows.
    pub bernoulli_local_scale: f64,
    /// `log p(μ|θ) + ½ μᵀQμ`: the prior log-normaliser including its θ-dependent determinant.
    pub log_prior_norm: f64,
}

#[derive(Debug, Clone)]
struct BlockFactor {
    chol: Matrix2<f64>,
    dinv: Matrix2<f64>,
    b: Vec<[f64; 2]>,
}

/// Block Cholesky factorisation of an arrowhead precision matrix.
#[derive(Debug, Clone)]
pub struct ArrowheadFactor {
    blocks: Vec<BlockFactor>,
    schur: DenseCholesky,
    log_det: f64,
}

impl ArrowheadFactor {
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn schur(&self) -> &DenseCholesky {
        &self.schur
    }

    /// Solves `Q x = rhs`.
    pub fn solve(&self, pattern: &LgmPattern, rhs: &[f64]) -> DVector<f64> {
        let go = pattern.global_offset();
        let mut rg = rhs[go..].to_vec();
        for (b, blk) in self.blocks.iter().enumerate() {
            let rb = Vector2::new(rhs[2 * b], rhs[2 * b + 1]);
            let dr = blk.dinv * rb;
            for (p, &c) in pattern.block_cols[b].iter().enumerate() {
                rg[c] -= blk.b[p][0] * dr[0] + blk.b[p][1] * dr[1];
            }
        }
        self.schur.solve_in_place(&mut rg);
        let mut x = DVector::zeros(pattern.dim());
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut r0 = rhs[2 * b];
            let mut r1 = rhs[2 * b + 1];
            for (p, xg) in pattern.gather(b, &rg).enumerate() {
                r0 -= blk.b[p][0] * xg;
                r1 -= blk.b[p][1] * xg;
            }
            let xb = blk.dinv * Vector2::new(r0, r1);
            x[2 * b] = xb[0];
            x[2 * b + 1] = xb[1];
        }
        x.rows_mut(go, rg.len()).copy_from_slice(&rg);
        x
    }

    /// Maps standard normal `z` to a draw from `N(0, Q⁻¹)` via `x = L⁻ᵀ z`.
    pub fn sample_from_normals(&self, pattern: &LgmPattern, z: &[f64]) -> DVector<f64> {
        let go = pattern.global_offset();
        let mut xg = z[go..].to_vec();
        self.schur.solve_upper_in_place(&mut xg);
        let mut x = DVector::zeros(pattern.dim());
        for (b, blk) in self.blocks.iter().enumerate() {
            let (mut t0, mut t1) = (0.0, 0.0);
            for (p, v) in pattern.gather(b, &xg).enumerate() {
                t0 += blk.b[p][0] * v;
                t1 += blk.b[p][1] * v;
            }
            // w = L_D⁻¹ (B x_g), then x_b = L_D⁻ᵀ (z_b − w).
            let l = &blk.chol;
            let w0 = t0 / l[(0, 0)];
            let w1 = (t1 - l[(1, 0)] * w0) / l[(1, 1)];
            let r0 = z[2 * b] - w0;
            let r1 = z[2 * b + 1] - w1;
            let x1 = r1 / l[(1, 1)];
            let x0 = (r0 - l[(1, 0)] * x1) / l[(0, 0)];
            x[2 * b] = x0;
            x[2 * b + 1] = x1;
        }
        x.rows_mut(go, xg.len()).copy_from_slice(&xg);
        x
    }

    /// `D_i⁻¹ B_i` contribution used to propagate a global correction to block `b`.
    fn propagate_global(&self, pattern: &LgmPattern, b: usize, dg: &[f64]) -> Vector2<f64> {
        let blk = &self.blocks[b];
        let (mut t0, mut t1) = (0.0, 0.0);
        for (p, v) in pattern.gather(b, dg).enumerate() {
            t0 += blk.b[p][0] * v;
            t1 += blk.b[p][1] * v;
        }
        blk.dinv * Vector2::new(t0, t1)
    }

    /// Marginal covariance of block `b` given the global covariance `cov_g`.
    fn block_covariance(&self, pattern: &LgmPattern, b: usize, cov_g: &DMatrix<f64>) -> Matrix2<f64> {
        let blk = &self.blocks[b];
        let cols = &pattern.block_cols[b];
        let m: Vec<[f64; 2]> = blk
            .b
            .iter()
            .map(|c| {
                let v = blk.dinv * Vector2::new(c[0], c[1]);
                [v[0], v[1]]
            })
            .collect();
        let mut acc = blk.dinv;
        for (a, &ca) in cols.iter().enumerate() {
            for (bb, &cb) in cols.iter().enumerate() {
                let s = cov_g[(ca, cb)];
                acc[(0, 0)] += m[a][0] * s * m[bb][0];
                acc[(0, 1)] += m[a][0] * s * m[bb][1];
                acc[(1, 1)] += m[a][1] * s * m[bb][1];
            }
        }
        acc[(1, 0)] = acc[(0, 1)];
        acc
    }
}

/// An arrowhead factor together with the conditioning-by-kriging correction
/// for the pattern's global constraints.
#[derive(Debug, Clone)]
pub struct ConstrainedFactor {
    pub factor: ArrowheadFactor,
    /// `V_g = S⁻¹ A_gᵀ` (global part of `Q⁻¹Aᵀ`).
    v_g: DMatrix<f64>,
    w_chol: Option<DenseCholesky>,
}

impl ConstrainedFactor {
    pub fn new(pattern: &LgmPattern, factor: ArrowheadFactor) -> Result<Self> {
        let c = pattern.constraints();
        if c.is_empty() {
            return Ok(Self {
                factor,
                v_g: DMatrix::zeros(pattern.global_dim(), 0),
                w_chol: None,
            });
        }
        // A only touches the global part, so (Q⁻¹Aᵀ)_g = S⁻¹A_gᵀ.
        let v_g = factor.schur.solve_matrix(&c.rows.transpose());
        let w = &c.rows * &v_g;
        let w_chol = DenseCholesky::new(&w)
            .map_err(|_| StjmError::Model("constraint rows are linearly dependent".into()))?;
        Ok(Self {
            factor,
            v_g,
            w_chol: Some(w_chol),
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.v_g.ncols()
    }

    /// `log |A Q⁻¹ Aᵀ|`, zero without constraints.
    pub fn log_det_w(&self) -> f64 {
        self.w_chol.as_ref().map_or(0.0, DenseCholesky::log_det)
    }

    /// Projects `x` onto `{A x = e}` with the kriging correction.
    pub fn constrain(&self, pattern: &LgmPattern, x: &mut DVector<f64>) {
        let Some(w) = &self.w_chol else { return };
        let c = pattern.constraints();
        let go = pattern.global_offset();
        let xg = x.rows(go, pattern.global_dim()).clone_owned();
        let mut r = &c.rows * xg - &c.rhs;
        w.solve_in_place(r.as_mut_slice());
        let dg = &self.v_g * r;
        for b in 0..pattern.n_blocks() {
            let d = self.factor.propagate_global(pattern, b, dg.as_slice());
            x[2 * b] += d[0];
            x[2 * b + 1] += d[1];
        }
        let mut g = x.rows_mut(go, pattern.global_dim());
        g -= &dg;
    }

    /// `Q⁻¹ rhs` followed by the kriging correction.
    pub fn solve_constrained(&self, pattern: &LgmPattern, rhs: &[f64]) -> DVector<f64> {
        let mut x = self.factor.solve(pattern, rhs);
        self.constrain(pattern, &mut x);
        x
    }

    /// Constrained draw around `mean` from standard normals `z`.
    pub fn sample(&self, pattern: &LgmPattern, mean: &DVector<f64>, z: &[f64]) -> DVector<f64> {
        let mut x = self.factor.sample_from_normals(pattern, z) + mean;
        self.constrain(pattern, &mut x);
        x
    }

    /// Covariance of the global part under the constraints.
    pub fn global_covariance(&self) -> DMatrix<f64> {
        let inv = self.factor.schur.inverse();
        match &self.w_chol {
            None => inv,
            Some(w) => {
                let winv_vt = w.solve_matrix(&self.v_g.transpose());
                inv - &self.v_g * winv_vt
            }
        }
    }

    /// Constrained marginal variances of every latent coordinate.
    pub fn marginal_variances(&self, pattern: &LgmPattern) -> Vec<f64> {
        let cov_g = self.global_covariance();
        let mut out = Vec::with_capacity(pattern.dim());
        for b in 0..pattern.n_blocks() {
            let c = self.factor.block_covariance(pattern, b, &cov_g);
            out.push(c[(0, 0)]);
            out.push(c[(1, 1)]);
        }
        out.extend(cov_g.diagonal().iter().copied());
        out
    }

    /// Log-density of the constrained Gaussian `N(mean, Q⁻¹ | A x = e)` at `x`,
    /// given the quadratic form `(x − mean)ᵀ Q (x − mean)`.
    pub fn log_density_from_quad(&self, dim: usize, quad: f64) -> f64 {
        let k = self.n_constraints();
        -0.5 * (dim - k) as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.factor.log_det()
            + 0.5 * self.log_det_w()
            - 0.5 * quad
    }
}

/// `(x − m)ᵀ (Q_prior + Σ_j w_j a_j a_jᵀ) (x − m)` evaluated row by row.
pub fn posterior_quad(pattern: &LgmPattern, inst: &LgmInstance, weights: &[f64], diff: &[f64]) -> f64 {
    let eta = pattern.linear_predictors(inst, diff);
    let lik: f64 = weights.iter().zip(&eta).map(|(w, e)| w * e * e).sum();
    pattern.prior_quad(inst, diff) + lik
}

/// A model whose latent field is Gaussian given hyperparameters `θ`
/// (on an unconstrained internal scale).
pub trait LatentModel: Sync {
    fn pattern(&self) -> &LgmPattern;

    fn hyper_names(&self) -> Vec<String>;

    fn instance(&self, theta: &[f64]) -> Result<LgmInstance>;

    /// Log hyper-prior density on the internal scale, Jacobian included.
    fn log_hyper_prior(&self, theta: &[f64]) -> f64;

    fn initial_theta(&self) -> Vec<f64>;

    /// Maps internal coordinate `k` to the reporting scale.
    fn hyper_to_user(&self, _k: usize, internal: f64) -> f64 {
        internal
    }

    fn latent_names(&self) -> Vec<String> {
        let p = self.pattern();
        let mut names = Vec::with_capacity(p.dim());
        for b in 0..p.n_blocks() {
            names.push(format!("U0[{b}]"));
            names.push(format!("U1[{b}]"));
        }
        names.extend((0..p.global_dim()).map(|g| format!("x[{g}]")));
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small mixed pattern with two blocks, three global columns and one constraint.
    fn toy() -> (LgmPattern, LgmInstance) {
        let mut rows = Vec::new();
        for b in 0..2 {
            for s in 1..=3 {
                rows.push(ObsRow {
                    response: Response::Gaussian(0.1 * s as f64 + b as f64),
                    block: Some(b),
                    local: [1.0, s as f64],
                    global: vec![(0, 1.0), (1, s as f64)],
                });
                rows.push(ObsRow {
                    response: Response::Bernoulli(s == 3 && b == 0),
                    block: Some(b),
                    local: [1.0, s as f64],
                    global: vec![(2, 1.0), (1, 0.3)],
                });
            }
        }
        rows.push(ObsRow {
            response: Response::Gaussian(0.5),
            block: None,
            local: [0.0, 0.0],
            global: vec![(0, 1.0), (2, -1.0)],
        });
        let c = ConstraintSet::from_rows(vec![vec![0.0, 1.0, 1.0]], 3);
        let pattern = LgmPattern::new(2, 3, rows, c).unwrap();
        let inst = LgmInstance {
            local_prior: Matrix2::new(2.0, 0.3, 0.3, 5.0),
            global_prior: DMatrix::from_diagonal_element(3, 3, 0.5),
            gaussian_precision: 4.0,
            bernoulli_local_scale: 0.7,
            log_prior_norm: 0.0,
        };
        (pattern, inst)
    }

    fn dense_precision(p: &LgmPattern, inst: &LgmInstance, w: &[f64]) -> DMatrix<f64> {
        let n = p.dim();
        let mut q = DMatrix::zeros(n, n);
        for b in 0..p.n_blocks() {
            q.view_mut((2 * b, 2 * b), (2, 2)).copy_from(&inst.local_prior);
        }
        let go = p.global_offset();
        q.view_mut((go, go), (p.global_dim(), p.global_dim())).copy_from(&inst.global_prior);
        for (j, r) in p.rows().iter().enumerate() {
            let mut a = DVector::zeros(n);
            if let Some(b) = r.block {
                let l = p.local_coefs(r, inst);
                a[2 * b] = l[0];
                a[2 * b + 1] = l[1];
            }
            for &(c, v) in &r.global {
                a[go + c] += v;
            }
            q += w[j] * &a * a.transpose();
        }
        q
    }

    #[test]
    fn arrowhead_solve_logdet_and_variances_match_dense() {
        let (p, inst) = toy();
        let w: Vec<f64> = (0..p.rows().len()).map(|j| 0.2 + 0.1 * (j % 4) as f64).collect();
        let f = p.factor(&inst, &w).unwrap();
        let q = dense_precision(&p, &inst, &w);
        let chol = q.clone().cholesky().unwrap();
        let rhs: Vec<f64> = (0..p.dim()).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = f.solve(&p, &rhs);
        let x_dense = chol.solve(&DVector::from_column_slice(&rhs));
        assert!((x - &x_dense).amax() < 1e-10);
        let ld = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((f.log_det() - ld).abs() < 1e-10);

        let cf = ConstrainedFactor::new(&p, f).unwrap();
        let fc = p.full_constraints();
        let qinv = chol.inverse();
        let v = &qinv * fc.rows.transpose();
        let w_m = &fc.rows * &v;
        let cov = &qinv - &v * w_m.clone().try_inverse().unwrap() * v.transpose();
        let mv = cf.marginal_variances(&p);
        for k in 0..p.dim() {
            assert!((mv[k] - cov[(k, k)]).abs() < 1e-10, "{k}");
        }
        assert!((cf.log_det_w() - w_m.determinant().ln()).abs() < 1e-10);

        let mut y = DVector::from_column_slice(&rhs);
        cf.constrain(&p, &mut y);
        assert!(fc.max_residual(y.as_slice()) < 1e-12);
        let y_dense = DVector::from_column_slice(&rhs) - &v * w_m.try_inverse().unwrap() * (&fc.rows * DVector::from_column_slice(&rhs));
        assert!((y - y_dense).amax() < 1e-10);
    }

    #[test]
    fn sample_map_has_precision_inverse_covariance() {
        // x = L⁻ᵀ z is linear in z; its covariance is M Mᵀ with M the map's matrix.
        let (p, inst) = toy();
        let w = vec![1.0; p.rows().len()];
        let f = p.factor(&inst, &w).unwrap();
        let n = p.dim();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut z = vec![0.0; n];
            z[k] = 1.0;
            m.set_column(k, &f.sample_from_normals(&p, &z));
        }
        let cov = &m * m.transpose();
        let q = dense_precision(&p, &inst, &w);
        assert!((cov * q - DMatrix::identity(n, n)).amax() < 1e-9);
    }

    #[test]
    fn bernoulli_working_weights_match_finite_differences() {
        let h = 1e-4;
        for k in 0..20 {
            let eta = -6.0 + 0.63 * k as f64;
            for x in [false, true] {
                let f = |e: f64| bernoulli_log_pmf(x, e);
                let fd2 = (f(eta + h) - 2.0 * f(eta) + f(eta - h)) / (h * h);
                let fd1 = (f(eta + h) - f(eta - h)) / (2.0 * h);
                let (g, w) = row_derivatives(Response::Bernoulli(x), eta, 1.0);
                assert!((w + fd2).abs() < 1e-6, "eta={eta}");
                assert!((g - fd1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pattern_rejects_bad_indices() {
        let row = ObsRow {
            response: Response::Gaussian(0.0),
            block: Some(3),
            local: [1.0, 0.0],
            global: vec![],
        };
        assert!(LgmPattern::new(2, 1, vec![row], ConstraintSet::empty(1)).is_err());
    }
}

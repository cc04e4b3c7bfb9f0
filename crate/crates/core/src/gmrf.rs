//! Structure matrices for the temporal, spatial and interaction effects,
//! their sum-to-zero constraints, and constrained Gaussian sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StjmError};
use crate::graph::AdjacencyGraph;
use crate::linalg::DenseCholesky;
use crate::sparse::SparseSymmetric;

/// Baseline-hazard specification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `ν₀ + v_s`
    M1,
    /// `ν₀ + v_s + u_a`
    M2,
    /// `ν₀ + v_s + u_a + δ_{a,s}`
    M3,
}

impl Variant {
    pub fn has_spatial(self) -> bool {
        !matches!(self, Variant::M1)
    }

    pub fn has_interaction(self) -> bool {
        matches!(self, Variant::M3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = StjmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            other => Err(StjmError::Config(format!("unknown variant `{other}` (expected m1, m2 or m3)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Second-order random-walk structure matrix `DᵀD`, `D` the `(T−2)×T`
/// second-difference operator.
pub fn build_rw2_structure(t: usize) -> Result<SparseSymmetric> {
    if t < 3 {
        return Err(StjmError::InvalidDimension(format!(
            "RW2 needs at least 3 time points, got {t}"
        )));
    }
    let mut triplets = Vec::with_capacity(9 * (t - 2));
    let stencil = [1.0, -2.0, 1.0];
    for k in 0..t - 2 {
        for (a, ca) in stencil.iter().enumerate() {
            for (b, cb) in stencil.iter().enumerate().skip(a) {
                triplets.push((k + a, k + b, ca * cb));
            }
        }
    }
    SparseSymmetric::from_triplets(t, triplets)
}

/// ICAR structure matrix: `m_a` on the diagonal, `−1` for neighbours.
pub fn build_icar_structure(graph: &AdjacencyGraph) -> SparseSymmetric {
    let n = graph.n_areas();
    let diag = (1..=n).map(|a| (a - 1, a - 1, graph.degree(a) as f64));
    let off = graph.pairs().map(|(a, b)| (a - 1, b - 1, -1.0));
    SparseSymmetric::from_triplets(n, diag.chain(off)).expect("graph ids validated on construction")
}

/// `R_δ = R_v ⊗ R_u`; area `a` at time `s` (both 1-based) sits at `(s−1)·A + (a−1)`.
pub fn build_interaction_structure(rv: &SparseSymmetric, ru: &SparseSymmetric) -> SparseSymmetric {
    rv.kron(ru)
}

/// Position of `δ_{a,s}` (1-based area and time) inside the interaction vector.
#[inline]
pub fn interaction_index(a: usize, s: usize, n_areas: usize) -> usize {
    (s - 1) * n_areas + (a - 1)
}

/// Linear equality constraints `rows · x = rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl ConstraintSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: DMatrix::zeros(0, dim),
            rhs: DVector::zeros(0),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Self {
        let k = rows.len();
        let m = DMatrix::from_fn(k, dim, |i, j| rows[i][j]);
        Self {
            rows: m,
            rhs: DVector::zeros(k),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Places the constrained vector at `offset` inside a vector of length `total`.
    pub fn embed(&self, offset: usize, total: usize) -> Self {
        let mut rows = DMatrix::zeros(self.len(), total);
        rows.view_mut((0, offset), (self.len(), self.dim())).copy_from(&self.rows);
        Self {
            rows,
            rhs: self.rhs.clone(),
        }
    }

    /// Stacks two constraint sets over the same vector.
    pub fn stack(&self, other: &ConstraintSet) -> Self {
        assert_eq!(self.dim(), other.dim());
        let k = self.len() + other.len();
        let mut rows = DMatrix::zeros(k, self.dim());
        rows.view_mut((0, 0), (self.len(), self.dim())).copy_from(&self.rows);
        rows.view_mut((self.len(), 0), (other.len(), self.dim())).copy_from(&other.rows);
        let rhs = DVector::from_iterator(k, self.rhs.iter().chain(other.rhs.iter()).copied());
        Self { rows, rhs }
    }

    /// `max_k |(A x − e)_k|`.
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (&self.rows * xv - &self.rhs).amax()
    }
}

/// Sum-to-zero constraints over the stacked random-effect vector `(v, u, δ)`
/// for the given variant. The redundant interaction row (the area-sum at the
/// last time point) is dropped so the rows have full rank.
pub fn build_constraints(t: usize, n_areas: usize, variant: Variant) -> Result<ConstraintSet> {
    if t < 3 {
        return Err(StjmError::InvalidDimension(format!("T must be at least 3, got {t}")));
    }
    if variant.has_spatial() && n_areas == 0 {
        return Err(StjmError::InvalidDimension("spatial variants need at least one area".into()));
    }
    let a = if variant.has_spatial() { n_areas } else { 0 };
    let ta = if variant.has_interaction() { t * n_areas } else { 0 };
    let dim = t + a + ta;
    let mut rows = Vec::new();
    let mut sum_v = vec![0.0; dim];
    sum_v[..t].iter_mut().for_each(|x| *x = 1.0);
    rows.push(sum_v);
    if variant.has_spatial() {
        let mut sum_u = vec![0.0; dim];
        sum_u[t..t + a].iter_mut().for_each(|x| *x = 1.0);
        rows.push(sum_u);
    }
    if variant.has_interaction() {
        let off = t + a;
        for area in 1..=n_areas {
            let mut row = vec![0.0; dim];
            for s in 1..=t {
                row[off + interaction_index(area, s, n_areas)] = 1.0;
            }
            rows.push(row);
        }
        for s in 1..t {
            let mut row = vec![0.0; dim];
            for area in 1..=n_areas {
                row[off + interaction_index(area, s, n_areas)] = 1.0;
            }
            rows.push(row);
        }
    }
    Ok(ConstraintSet::from_rows(rows, dim))
}

/// Adds `eps` to every diagonal entry.
pub fn with_jitter(q: &SparseSymmetric, eps: f64) -> SparseSymmetric {
    let n = q.dim();
    SparseSymmetric::from_triplets(
        n,
        q.upper_entries()
            .iter()
            .copied()
            .chain((0..n).map(|i| (i, i, eps))),
    )
    .expect("same dimension")
}

/// Conditioning-by-kriging correction for a Gaussian with precision factor
/// `chol`: stores `V = Q⁻¹Aᵀ` and the factor of `W = AQ⁻¹Aᵀ`.
#[derive(Debug, Clone)]
pub struct KrigingCorrection {
    v: DMatrix<f64>,
    w_chol: DenseCholesky,
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl KrigingCorrection {
    pub fn new(chol: &DenseCholesky, constraints: &ConstraintSet) -> Result<Self> {
        let at = constraints.rows.transpose();
        let v = chol.solve_matrix(&at);
        let w = &constraints.rows * &v;
        let w_chol = DenseCholesky::new(&w).map_err(|_| {
            StjmError::InvalidDimension("constraint rows are linearly dependent".into())
        })?;
        Ok(Self {
            v,
            w_chol,
            rows: constraints.rows.clone(),
            rhs: constraints.rhs.clone(),
        })
    }

    /// `x − V W⁻¹ (A x − e)`.
    pub fn apply(&self, x: &mut DVector<f64>) {
        let mut r = &self.rows * &*x - &self.rhs;
        self.w_chol.solve_in_place(r.as_mut_slice());
        *x -= &self.v * r;
    }

    /// Covariance of the conditioned Gaussian, `Q⁻¹ − V W⁻¹ Vᵀ`.
    pub fn conditioned_covariance(&self, chol: &DenseCholesky) -> DMatrix<f64> {
        let winv_vt = self.w_chol.solve_matrix(&self.v.transpose());
        chol.inverse() - &self.v * winv_vt
    }

    pub fn log_det_w(&self) -> f64 {
        self.w_chol.log_det()
    }
}

/// Draws `n` samples from `N(mean, Q⁻¹)` conditioned on the constraints.
///
/// `q` must be positive definite; intrinsic structure matrices need
/// [`with_jitter`] first.
pub fn sample_constrained_gaussian<R: Rng + ?Sized>(
    q: &SparseSymmetric,
    mean: &DVector<f64>,
    constraints: &ConstraintSet,
    n: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let dim = q.dim();
    if mean.len() != dim || (!constraints.is_empty() && constraints.dim() != dim) {
        return Err(StjmError::InvalidDimension(format!(
            "precision is {dim}x{dim}, mean has {} entries, constraints {} columns",
            mean.len(),
            constraints.dim()
        )));
    }
    let chol = DenseCholesky::new(&q.to_dense())?;
    let correction = if constraints.is_empty() {
        None
    } else {
        Some(KrigingCorrection::new(&chol, constraints)?)
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        chol.solve_upper_in_place(z.as_mut_slice());
        let mut x = z + mean;
        if let Some(c) = &correction {
            c.apply(&mut x);
        }
        out.push(x);
    }
    Ok(out)
}

/// Draws from the intrinsic Gaussian with precision `tau · r`, restricted to
/// the orthogonal complement of `r`'s null space. Equivalent to the jittered
/// sampler conditioned on a full null-space basis.
pub fn sample_intrinsic<R: Rng + ?Sized>(r: &SparseSymmetric, tau: f64, rng: &mut R) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(StjmError::InvalidHyperparameter(format!("precision must be positive, got {tau}")));
    }
    let eig = r.to_dense().symmetric_eigen();
    let cutoff = 1e-9 * eig.eigenvalues.amax();
    let mut x = DVector::zeros(r.dim());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let z: f64 = rng.sample(StandardNormal);
            x.axpy(z / (tau * l).sqrt(), &eig.eigenvectors.column(k), 1.0);
        }
    }
    Ok(x)
}

/// [`sample_intrinsic`] for `tau · (r_time ⊗ r_space)`, using the Kronecker
/// eigenstructure. Output is time-major like [`interaction_index`].
pub fn sample_intrinsic_kron<R: Rng + ?Sized>(
    r_time: &SparseSymmetric,
    r_space: &SparseSymmetric,
    tau: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(StjmError::InvalidHyperparameter(format!("precision must be positive, got {tau}")));
    }
    let et = r_time.to_dense().symmetric_eigen();
    let es = r_space.to_dense().symmetric_eigen();
    let cutoff = 1e-9 * et.eigenvalues.amax() * es.eigenvalues.amax();
    let (t, a) = (r_time.dim(), r_space.dim());
    let mut coef = DMatrix::zeros(t, a);
    for i in 0..t {
        for j in 0..a {
            let l = et.eigenvalues[i] * es.eigenvalues[j];
            if l > cutoff {
                let z: f64 = rng.sample(StandardNormal);
                coef[(i, j)] = z / (tau * l).sqrt();
            }
        }
    }
    let grid = &et.eigenvectors * coef * es.eigenvectors.transpose();
    Ok(DVector::from_fn(t * a, |k, _| grid[(k / a, k % a)]))
}

/// Conditional mean and variance of `u_a` given the other areas under the
/// ICAR prior with precision `tau_u`.
pub fn icar_full_conditional(u: &[f64], area: usize, graph: &AdjacencyGraph, tau_u: f64) -> Result<(f64, f64)> {
    if area == 0 || area > graph.n_areas() || u.len() != graph.n_areas() {
        return Err(StjmError::InvalidDimension(format!(
            "area {area} / vector length {} do not match a graph of {} areas",
            u.len(),
            graph.n_areas()
        )));
    }
    let nb = graph.neighbours(area);
    if nb.is_empty() {
        return Err(StjmError::DegenerateConditional { area });
    }
    let m = nb.len() as f64;
    let mean = nb.iter().map(|&b| u[b - 1]).sum::<f64>() / m;
    Ok((mean, 1.0 / (tau_u * m)))
}

//! Symmetric sparse matrices in upper-triangular triplet form.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StjmError};

/// A symmetric matrix stored as its upper triangle (`row <= col`).
///
/// Entries are kept sorted by `(row, col)` and duplicates are summed on
/// construction, so transposed lookups are bit-identical by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    /// Builds from arbitrary triplets; `(i, j)` and `(j, i)` are treated as the
    /// same upper entry and summed. Exact zeros are dropped.
    pub fn from_triplets(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(StjmError::InvalidDimension(format!(
                    "entry ({i}, {j}) outside a {dim}x{dim} matrix"
                )));
            }
            let key = if i <= j { (i, j) } else { (j, i) };
            *map.entry(key).or_insert(0.0) += v;
        }
        let entries = map
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|((i, j), v)| (i, j, v))
            .collect();
        Ok(Self { dim, entries })
    }

    /// Like [`SparseSymmetric::from_triplets`] but keeps explicit zeros, so the
    /// stored pattern depends only on which positions were supplied.
    pub fn from_triplets_structural(
        dim: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(StjmError::InvalidDimension(format!(
                    "entry ({i}, {j}) outside a {dim}x{dim} matrix"
                )));
            }
            *map.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
        }
        let entries = map.into_iter().map(|((i, j), v)| (i, j, v)).collect();
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            entries: (0..dim).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored upper-triangular entries.
    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    pub fn upper_entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Every stored entry together with its mirror image.
    pub fn full_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().flat_map(|&(i, j, v)| {
            let mirror = if i != j { Some((j, i, v)) } else { None };
            std::iter::once((i, j, v)).chain(mirror)
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        match self.entries.binary_search_by(|&(r, c, _)| (r, c).cmp(&key)) {
            Ok(pos) => self.entries[pos].2,
            Err(_) => 0.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, v * factor)).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.full_entries() {
            m[(i, j)] = v;
        }
        m
    }

    /// Adds `factor · self` into the square sub-block of `target` starting at `offset`.
    pub fn add_to_dense(&self, target: &mut DMatrix<f64>, offset: usize, factor: f64) {
        for (i, j, v) in self.full_entries() {
            target[(offset + i, offset + j)] += factor * v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "dimension mismatch in sparse mat-vec");
        let mut y = vec![0.0; self.dim];
        for (i, j, v) in self.full_entries() {
            y[i] += v * x[j];
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.full_entries().map(|(i, j, v)| x[i] * v * x[j]).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mul_vec(&vec![1.0; self.dim])
    }

    /// Kronecker product `self ⊗ other`; index `(p, q)` of the result maps to
    /// `p · other.dim + q`.
    pub fn kron(&self, other: &SparseSymmetric) -> SparseSymmetric {
        let m = other.dim;
        let mut triplets = Vec::new();
        for (i, j, a) in self.full_entries() {
            for (k, l, b) in other.full_entries() {
                let r = i * m + k;
                let c = j * m + l;
                if r <= c {
                    triplets.push((r, c, a * b));
                }
            }
        }
        // Distinct (i,j,k,l) never collide, so no summation happens here.
        SparseSymmetric::from_triplets(self.dim * m, triplets).expect("kron indices in range")
    }

    pub fn to_dvector_product(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_merge_and_mirror() {
        let m = SparseSymmetric::from_triplets(3, [(0, 1, 1.0), (1, 0, 2.0), (2, 2, 4.0)]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.nnz_upper(), 2);
        let d = m.to_dense();
        assert_eq!(d, d.transpose());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseSymmetric::from_triplets(2, [(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn kron_matches_dense() {
        let a = SparseSymmetric::from_triplets(2, [(0, 0, 2.0), (0, 1, -1.0), (1, 1, 3.0)]).unwrap();
        let b = SparseSymmetric::from_triplets(3, [(0, 0, 1.0), (1, 2, 5.0), (2, 2, -2.0)]).unwrap();
        let k = a.kron(&b).to_dense();
        assert_eq!(k, a.to_dense().kronecker(&b.to_dense()));
    }
}

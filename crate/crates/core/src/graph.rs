//! Area adjacency graphs and the plain-text adjacency file format.
//!
//! ```text
//! AREAS 3
//! 1	2
//! 2	3
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StjmError};

/// Undirected neighbour relation over areas `1..=n_areas`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    n_areas: usize,
    pairs: BTreeSet<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Validates and stores neighbour pairs given with 1-based ids.
    pub fn new(n_areas: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_areas == 0 {
            return Err(StjmError::InvalidGraph("graph must contain at least one area".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(StjmError::InvalidGraph(format!("self-pair ({a}, {b})")));
            }
            if a == 0 || b == 0 || a > n_areas || b > n_areas {
                return Err(StjmError::InvalidGraph(format!(
                    "pair ({a}, {b}) outside areas 1..={n_areas}"
                )));
            }
            let key = (a.min(b), a.max(b));
            if !set.insert(key) {
                return Err(StjmError::InvalidGraph(format!("duplicate pair ({a}, {b})")));
            }
        }
        let mut neighbours = vec![Vec::new(); n_areas];
        for &(a, b) in &set {
            neighbours[a - 1].push(b);
            neighbours[b - 1].push(a);
        }
        for list in &mut neighbours {
            list.sort_unstable();
        }
        Ok(Self {
            n_areas,
            pairs: set,
            neighbours,
        })
    }

    /// Rook-adjacency lattice; area `r · cols + c + 1` sits at row `r`, column `c`.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        let id = |r: usize, c: usize| r * cols + c + 1;
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    pairs.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    pairs.push((id(r, c), id(r + 1, c)));
                }
            }
        }
        Self::new(rows * cols, pairs)
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    /// Unordered pairs `(a, a')` with `a < a'`, 1-based.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Neighbours of 1-based area `a`.
    pub fn neighbours(&self, a: usize) -> &[usize] {
        &self.neighbours[a - 1]
    }

    /// Number of neighbours `m_a` of 1-based area `a`.
    pub fn degree(&self, a: usize) -> usize {
        self.neighbours[a - 1].len()
    }

    pub fn are_neighbours(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    /// Connected components as lists of 1-based ids, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n_areas];
        let mut out = Vec::new();
        for start in 1..=self.n_areas {
            if seen[start - 1] {
                continue;
            }
            let mut stack = vec![start];
            seen[start - 1] = true;
            let mut comp = Vec::new();
            while let Some(a) = stack.pop() {
                comp.push(a);
                for &b in self.neighbours(a) {
                    if !seen[b - 1] {
                        seen[b - 1] = true;
                        stack.push(b);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn n_components(&self) -> usize {
        self.components().len()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| StjmError::InvalidGraph("empty adjacency file".into()))?;
        let n_areas = header
            .strip_prefix("AREAS")
            .and_then(|rest| rest.trim().parse::<usize>().ok())
            .ok_or_else(|| StjmError::InvalidGraph(format!("expected `AREAS <A>` header, found `{header}`")))?;
        let mut pairs = Vec::new();
        for line in lines {
            let mut fields = line.split('\t');
            let parse = |f: Option<&str>| -> Result<usize> {
                f.and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| StjmError::InvalidGraph(format!("malformed adjacency line `{line}`")))
            };
            let a = parse(fields.next())?;
            let b = parse(fields.next())?;
            if fields.next().is_some() {
                return Err(StjmError::InvalidGraph(format!("malformed adjacency line `{line}`")));
            }
            pairs.push((a, b));
        }
        Self::new(n_areas, pairs)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("AREAS {}\n", self.n_areas);
        for (a, b) in self.pairs() {
            let _ = writeln!(s, "{a}\t{b}");
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

//! Comparison hypergraphs and exact topology diagnostics.
//!
//! Vertices are `0..n` internally. File loaders translate the 1-based ids
//! used in data files at the boundary.
//!
//! Multi-edges (rematches) are kept and counted with multiplicity by every
//! diagnostic in this module.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// Largest `n` accepted by [`Hypergraph::cheeger_constant`].
pub const CHEEGER_EXHAUSTIVE_CAP: usize = 22;
/// Largest `n` accepted by [`Hypergraph::weakly_admissible_diameter`].
pub const DIAMETER_EXHAUSTIVE_CAP: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    n: usize,
    edges: Vec<Vec<usize>>,
}

/// Pairwise breaking of a hypergraph: each edge `(j1 < j2 < ... < jm)` becomes
/// the star `(j1, j2), ..., (j1, jm)` anchored at its smallest vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Breaking {
    /// Oriented pairs `(source, target)` with `source < target`.
    pub pairs: Vec<(usize, usize)>,
    /// Index of the hyperedge each pair came from.
    pub source_edge: Vec<usize>,
}

impl Breaking {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl Hypergraph {
    /// Builds a hypergraph on `n` vertices. Each edge is sorted ascending; an
    /// edge with fewer than two members, a repeated member, or a vertex
    /// outside `0..n` is rejected.
    pub fn new(n: usize, edges: Vec<Vec<usize>>) -> Result<Self> {
        let mut canon = Vec::with_capacity(edges.len());
        for (i, mut e) in edges.into_iter().enumerate() {
            e.sort_unstable();
            if e.len() < 2 {
                return input(format!("edge {i} has {} member(s); at least 2 required", e.len()));
            }
            if e.windows(2).any(|w| w[0] == w[1]) {
                return input(format!("edge {i} repeats a vertex"));
            }
            if let Some(&v) = e.last() {
                if v >= n {
                    return input(format!("edge {i} references vertex {v} but n = {n}"));
                }
            }
            canon.push(e);
        }
        Ok(Self { n, edges: canon })
    }

    /// Same as [`Hypergraph::new`] but also enforces `|e| <= max_size`.
    pub fn with_size_cap(n: usize, edges: Vec<Vec<usize>>, max_size: usize) -> Result<Self> {
        let g = Self::new(n, edges)?;
        if let Some((i, e)) = g.edges.iter().enumerate().find(|(_, e)| e.len() > max_size) {
            return input(format!("edge {i} has size {} above cap {max_size}", e.len()));
        }
        Ok(g)
    }

    /// Convenience constructor taking 1-based vertex ids.
    pub fn from_one_based(n: usize, edges: &[&[usize]]) -> Result<Self> {
        let mut out = Vec::with_capacity(edges.len());
        for e in edges {
            if e.contains(&0) {
                return input("vertex ids are 1-based; found 0");
            }
            out.push(e.iter().map(|&v| v - 1).collect());
        }
        Self::new(n, out)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Largest edge size `M` (0 for an empty edge set).
    pub fn max_edge_size(&self) -> usize {
        self.edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Sum of edge sizes.
    pub fn total_incidence(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    fn check_vertex(&self, k: usize) -> Result<()> {
        if k >= self.n {
            return input(format!("vertex {k} out of range for n = {}", self.n));
        }
        Ok(())
    }

    /// Number of edges containing `k`, with multiplicity.
    pub fn degree(&self, k: usize) -> Result<usize> {
        self.check_vertex(k)?;
        Ok(self.edges.iter().filter(|e| e.binary_search(&k).is_ok()).count())
    }

    /// All vertex degrees in one pass.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for e in &self.edges {
            for &v in e {
                deg[v] += 1;
            }
        }
        deg
    }

    fn membership(&self, set: &[usize]) -> Result<Vec<bool>> {
        let mut inside = vec![false; self.n];
        for &k in set {
            self.check_vertex(k)?;
            inside[k] = true;
        }
        let size = inside.iter().filter(|&&b| b).count();
        if size == 0 || size == self.n {
            return input("vertex set must be nonempty and proper");
        }
        Ok(inside)
    }

    /// Indices of the edges meeting both `set` and its complement.
    pub fn boundary(&self, set: &[usize]) -> Result<Vec<usize>> {
        let inside = self.membership(set)?;
        Ok(self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let hits = e.iter().filter(|&&v| inside[v]).count();
                hits > 0 && hits < e.len()
            })
            .map(|(i, _)| i)
            .collect())
    }

    /// `|boundary(U)| / min(|U|, |U^c|)`.
    pub fn cheeger_ratio(&self, set: &[usize]) -> Result<f64> {
        let inside = self.membership(set)?;
        let size = inside.iter().filter(|&&b| b).count();
        let b = self.boundary(set)?.len();
        Ok(b as f64 / size.min(self.n - size) as f64)
    }

    /// Connectivity of the vertex-edge incidence graph (union-find).
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = self.n;
        for e in &self.edges {
            let root = find(&mut parent, e[0]);
            for &v in &e[1..] {
                let r = find(&mut parent, v);
                if r != root {
                    parent[r] = root;
                    components -= 1;
                }
            }
        }
        components == 1
    }

    fn edge_masks(&self) -> Vec<u64> {
        self.edges
            .iter()
            .map(|e| e.iter().fold(0u64, |m, &v| m | (1u64 << v)))
            .collect()
    }

    /// Exact modified Cheeger constant `min_U |dU| / min(|U|, |U^c|)` over
    /// nonempty proper `U`, by enumerating every `U` with `|U| <= n/2`.
    pub fn cheeger_constant(&self) -> Result<f64> {
        self.cheeger_constant_with_cap(CHEEGER_EXHAUSTIVE_CAP)
    }

    pub fn cheeger_constant_with_cap(&self, cap: usize) -> Result<f64> {
        if self.n > cap || self.n > 63 {
            return Err(Error::Capability(format!(
                "exact Cheeger constant limited to n <= {cap} (got n = {}); \
                 use the min-degree upper bound or a spectral lower bound instead",
                self.n
            )));
        }
        if self.n < 2 {
            return input("Cheeger constant needs at least two vertices");
        }
        let masks = self.edge_masks();
        let n = self.n;
        let full = (1u64 << n) - 1;
        let half = n / 2;
        let best = (1u64..full)
            .into_par_iter()
            .filter(|u| (u.count_ones() as usize) <= half)
            .map(|u| {
                let cut = masks
                    .iter()
                    .filter(|&&e| e & u != 0 && e & !u & full != 0)
                    .count();
                cut as f64 / u.count_ones() as f64
            })
            .reduce(|| f64::INFINITY, f64::min);
        Ok(best)
    }

    /// Checks the weak-admissibility inequality for every consecutive pair of
    /// a nested sequence of vertex sets.
    pub fn is_weakly_admissible(&self, sequence: &[Vec<usize>], lambda: f64) -> Result<bool> {
        if self.n > 63 {
            return Err(Error::Capability("sequence check limited to n <= 63".into()));
        }
        let masks = self.edge_masks();
        let mut sets = Vec::with_capacity(sequence.len());
        for s in sequence {
            let mut m = 0u64;
            for &k in s {
                self.check_vertex(k)?;
                m |= 1 << k;
            }
            if m == 0 {
                return input("sets in an admissible sequence must be nonempty");
            }
            sets.push(m);
        }
        let full = if self.n == 64 { u64::MAX } else { (1u64 << self.n) - 1 };
        for w in sets.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a & !b != 0 || a == b {
                return Ok(false);
            }
            if !step_admissible(&masks, a, b & !a, full, lambda) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Longest `lambda`-weakly admissible sequence of strictly increasing
    /// vertex sets, by memoized search over all subset chains.
    pub fn weakly_admissible_diameter(&self, lambda: f64) -> Result<usize> {
        self.weakly_admissible_diameter_with_cap(lambda, DIAMETER_EXHAUSTIVE_CAP)
    }

    pub fn weakly_admissible_diameter_with_cap(&self, lambda: f64, cap: usize) -> Result<usize> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return input(format!("lambda must lie in (0, 1], got {lambda}"));
        }
        if self.n > cap || self.n > 20 {
            return Err(Error::Capability(format!(
                "exact diameter limited to n <= {cap} (got n = {})",
                self.n
            )));
        }
        if !self.is_connected() {
            return Err(Error::Domain("weakly admissible diameter needs a connected graph".into()));
        }
        if self.n <= 1 {
            return Ok(1);
        }
        let masks = self.edge_masks();
        let full = (1u64 << self.n) - 1;
        let size = 1usize << self.n;
        // longest[A] = longest admissible sequence starting at A.
        let mut longest = vec![1usize; size];
        let mut order: Vec<u64> = (1..=full).collect();
        order.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
        for a in order {
            if a == full {
                continue;
            }
            let free = full & !a;
            let mut best = 1;
            // Enumerate nonempty submasks of the complement.
            let mut s = free;
            while s != 0 {
                let cand = longest[(a | s) as usize] + 1;
                if cand > best && step_admissible(&masks, a, s, full, lambda) {
                    best = cand;
                }
                s = (s - 1) & free;
            }
            longest[a as usize] = best;
        }
        Ok(longest[1..].iter().copied().max().unwrap_or(1))
    }

    /// Star breaking of every edge, in edge order then within-edge order.
    pub fn break_edges(&self) -> Breaking {
        let cap = self.total_incidence() - self.edges.len();
        let mut pairs = Vec::with_capacity(cap);
        let mut source_edge = Vec::with_capacity(cap);
        for (i, e) in self.edges.iter().enumerate() {
            for &t in &e[1..] {
                pairs.push((e[0], t));
                source_edge.push(i);
            }
        }
        Breaking { pairs, source_edge }
    }
}

/// `|{e in dA : e meets S}| >= lambda |dA|` where `S = A_{j+1} \ A_j`.
fn step_admissible(masks: &[u64], a: u64, added: u64, full: u64, lambda: f64) -> bool {
    let mut boundary = 0usize;
    let mut advanced = 0usize;
    for &e in masks {
        if e & a != 0 && e & !a & full != 0 {
            boundary += 1;
            if e & added != 0 {
                advanced += 1;
            }
        }
    }
    if boundary == 0 {
        // Only the full set has an empty boundary in a connected graph.
        return false;
    }
    advanced as f64 >= lambda * boundary as f64 - 1e-12
}

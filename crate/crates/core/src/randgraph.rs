//! Random comparison-graph designs: the nonuniform random hypergraph model
//! (NURHM), the hypergraph stochastic block model (HSBM), and the fixed edge
//! count designs used by the consistency study.
//!
//! Bernoulli models are sampled by drawing a binomial edge count per edge
//! class and then that many distinct tuples by index unranking, which is
//! equivalent in distribution to independent inclusion of every tuple but
//! never enumerates the `C(n, m)` candidates.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::hypergraph::Hypergraph;
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NurhmSpec {
    pub n: usize,
    /// `edge_probs[k]` is the inclusion probability of each size-`(k + 2)` tuple.
    pub edge_probs: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HsbmSpec {
    pub n: usize,
    pub edge_size: usize,
    /// Contiguous blocks: block 0 holds vertices `0..block_sizes[0]`, etc.
    pub block_sizes: Vec<usize>,
    /// Within-block inclusion probabilities, one per block.
    pub within: Vec<f64>,
    /// Inclusion probability of every edge not contained in a single block.
    pub cross: f64,
    pub seed: u64,
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return input(format!("{what} = {p} is not a probability"));
    }
    Ok(())
}

impl NurhmSpec {
    pub fn max_edge_size(&self) -> usize {
        self.edge_probs.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge_probs.is_empty() {
            return input("NURHM needs at least the size-2 probability (M >= 2)");
        }
        for (k, &p) in self.edge_probs.iter().enumerate() {
            check_prob(p, &format!("p^({})", k + 2))?;
        }
        Ok(())
    }
}

impl HsbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.edge_size < 2 {
            return input("HSBM edge size must be at least 2");
        }
        if self.block_sizes.iter().sum::<usize>() != self.n {
            return input("block sizes must sum to n");
        }
        if self.within.len() != self.block_sizes.len() {
            return input("one within-block probability per block is required");
        }
        for (l, &w) in self.within.iter().enumerate() {
            check_prob(w, &format!("omega_{}", l + 1))?;
        }
        check_prob(self.cross, "omega_0")
    }

    fn block_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.block_sizes.len());
        let mut acc = 0;
        for &s in &self.block_sizes {
            starts.push(acc);
            acc += s;
        }
        starts
    }
}

/// `C(n, k)` or `None` on overflow of `u128`.
pub fn binomial_coefficient(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// The `rank`-th `k`-subset of `0..n` in lexicographic order.
pub fn unrank_combination(n: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for remaining in (1..=k).rev() {
        loop {
            let below = binomial_coefficient(n - next - 1, remaining - 1).unwrap_or(u128::MAX);
            if rank < below {
                out.push(next);
                next += 1;
                break;
            }
            rank -= below;
            next += 1;
        }
    }
    out
}

/// `count` distinct integers from `0..total` (Floyd's algorithm), ascending.
fn distinct_indices(rng: &mut SimRng, total: u128, count: u64) -> BTreeSet<u128> {
    let count = count as u128;
    let mut chosen = BTreeSet::new();
    for j in (total - count)..total {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen
}

fn binomial_count(rng: &mut SimRng, trials: u128, p: f64) -> Result<u64> {
    if trials == 0 || p == 0.0 {
        return Ok(0);
    }
    let trials = u64::try_from(trials)
        .or_else(|_| input("edge class too large for binomial sampling"))?;
    let dist = Binomial::new(trials, p).or_else(|e| input(format!("binomial: {e}")))?;
    Ok(dist.sample(rng))
}

fn tuple_count(n: usize, m: usize) -> Result<u128> {
    binomial_coefficient(n, m).map_or_else(|| input(format!("C({n}, {m}) overflows")), Ok)
}

/// Each size-`m` tuple is included independently with probability `p^(m)`.
pub fn sample_nurhm(spec: &NurhmSpec) -> Result<Hypergraph> {
    spec.validate()?;
    let mut rng = rng::from_seed(spec.seed);
    let mut edges = Vec::new();
    for (k, &p) in spec.edge_probs.iter().enumerate() {
        let m = k + 2;
        let total = tuple_count(spec.n, m)?;
        let count = binomial_count(&mut rng, total, p)?;
        for idx in distinct_indices(&mut rng, total, count) {
            edges.push(unrank_combination(spec.n, m, idx));
        }
    }
    Hypergraph::new(spec.n, edges)
}

/// Size-`M` edges inside block `l` appear with probability `within[l]`,
/// every other size-`M` edge with probability `cross`.
pub fn sample_hsbm(spec: &HsbmSpec) -> Result<Hypergraph> {
    spec.validate()?;
    let m = spec.edge_size;
    let mut rng = rng::from_seed(spec.seed);
    let starts = spec.block_starts();
    let mut edges = Vec::new();
    let mut within_total: u128 = 0;
    for (l, (&size, &w)) in spec.block_sizes.iter().zip(&spec.within).enumerate() {
        let total = tuple_count(size, m)?;
        within_total += total;
        let count = binomial_count(&mut rng, total, w)?;
        for idx in distinct_indices(&mut rng, total, count) {
            let local = unrank_combination(size, m, idx);
            edges.push(local.into_iter().map(|v| v + starts[l]).collect());
        }
    }
    let all = tuple_count(spec.n, m)?;
    let cross_total = all - within_total;
    let count = binomial_count(&mut rng, cross_total, spec.cross)?;
    if count > 0 {
        let block_of = block_lookup(&spec.block_sizes);
        let is_cross = |e: &[usize]| e.iter().any(|&v| block_of[v] != block_of[e[0]]);
        if count as u128 * 2 > cross_total {
            // Dense regime: rank the cross edges explicitly.
            let cross: Vec<u128> = (0..all)
                .filter(|&i| is_cross(&unrank_combination(spec.n, m, i)))
                .collect();
            for pos in distinct_indices(&mut rng, cross_total, count) {
                edges.push(unrank_combination(spec.n, m, cross[pos as usize]));
            }
        } else {
            let mut chosen = BTreeSet::new();
            while (chosen.len() as u64) < count {
                let idx = rng.random_range(0..all);
                if is_cross(&unrank_combination(spec.n, m, idx)) {
                    chosen.insert(idx);
                }
            }
            for idx in chosen {
                edges.push(unrank_combination(spec.n, m, idx));
            }
        }
    }
    Hypergraph::new(spec.n, edges)
}

fn block_lookup(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(l, &s)| std::iter::repeat_n(l, s))
        .collect()
}

/// Orders of the expected edge counts of a random design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EdgeOrders {
    Nurhm { xi_minus: f64, xi_plus: f64 },
    Hsbm { zeta_minus: f64 },
}

/// `xi = sum_m n^(m-1) p^(m)` for NURHM (homogeneous, so both bounds agree).
pub fn nurhm_edge_orders(spec: &NurhmSpec) -> EdgeOrders {
    let n = spec.n as f64;
    let xi: f64 = spec
        .edge_probs
        .iter()
        .enumerate()
        .map(|(k, &p)| n.powi(k as i32 + 1) * p)
        .sum();
    EdgeOrders::Nurhm { xi_minus: xi, xi_plus: xi }
}

/// `zeta_- = n^(M-1) min_l omega_l`, minimum taken over blocks and the cross class.
pub fn hsbm_edge_orders(spec: &HsbmSpec) -> EdgeOrders {
    let min = spec.within.iter().copied().fold(spec.cross, f64::min);
    EdgeOrders::Hsbm {
        zeta_minus: (spec.n as f64).powi(spec.edge_size as i32 - 1) * min,
    }
}

/// Fixed-edge-count designs of the synthetic consistency study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentDesign {
    /// Sizes 2..=7, edges allocated equally across sizes.
    Nurhm6,
    /// Two blocks of sizes floor(n/3) and ceil(2n/3), size-5 edges.
    Hsbm2,
}

impl std::str::FromStr for ExperimentDesign {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nurhm6" => Ok(Self::Nurhm6),
            "hsbm2" => Ok(Self::Hsbm2),
            other => input(format!("unknown design '{other}' (expected nurhm6 or hsbm2)")),
        }
    }
}

impl std::fmt::Display for ExperimentDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nurhm6 => "nurhm6",
            Self::Hsbm2 => "hsbm2",
        })
    }
}

impl ExperimentDesign {
    /// Edge count used by the consistency study: `0.1 n (ln n)^3` for
    /// nurhm6 and `0.07 n^2` for hsbm2, truncated to an integer.
    pub fn edge_count(self, n: usize) -> usize {
        let nf = n as f64;
        let raw = match self {
            Self::Nurhm6 => 0.1 * nf * nf.ln().powi(3),
            Self::Hsbm2 => 0.07 * nf * nf,
        };
        // Truncated; the guard absorbs representation error such as 0.07 * n^2.
        (raw + 1e-9).floor() as usize
    }

    /// Community weights within-V1 : within-V2 : cross for hsbm2.
    pub fn hsbm2_weights(n: usize) -> [f64; 3] {
        let nf = n as f64;
        [5.0 * nf, 20.0 * nf, 4.0 * nf.ln().powi(3)]
    }
}

/// Samples exactly `n_edges` edges; each edge is drawn independently, so
/// repeated edges are possible.
pub fn sample_experiment_design(
    kind: ExperimentDesign,
    n: usize,
    n_edges: usize,
    rng: &mut SimRng,
) -> Result<Hypergraph> {
    if n_edges == 0 {
        return input("edge count must be at least 1");
    }
    let mut edges = Vec::with_capacity(n_edges);
    match kind {
        ExperimentDesign::Nurhm6 => {
            let sizes: Vec<usize> = (2..=7).collect();
            let base = n_edges / sizes.len();
            let extra = n_edges % sizes.len();
            for (k, &m) in sizes.iter().enumerate() {
                let count = base + usize::from(k < extra);
                let total = tuple_count(n, m)?;
                if count as u128 > total {
                    return input(format!(
                        "{count} size-{m} edges requested but only {total} distinct tuples exist"
                    ));
                }
                for _ in 0..count {
                    let idx = rng.random_range(0..total);
                    edges.push(unrank_combination(n, m, idx));
                }
            }
        }
        ExperimentDesign::Hsbm2 => {
            let m = 5;
            let n1 = n / 3;
            let n2 = n - n1;
            let within1 = tuple_count(n1, m)?;
            let within2 = tuple_count(n2, m)?;
            let all = tuple_count(n, m)?;
            if within1 == 0 || within2 == 0 {
                return input(format!("hsbm2 needs blocks of at least {m} vertices (n = {n})"));
            }
            let w = ExperimentDesign::hsbm2_weights(n);
            let total_w: f64 = w.iter().sum();
            for _ in 0..n_edges {
                let r = rng.random::<f64>() * total_w;
                if r < w[0] {
                    let idx = rng.random_range(0..within1);
                    edges.push(unrank_combination(n1, m, idx));
                } else if r < w[0] + w[1] {
                    let idx = rng.random_range(0..within2);
                    edges.push(unrank_combination(n2, m, idx).into_iter().map(|v| v + n1).collect());
                } else {
                    loop {
                        let e = unrank_combination(n, m, rng.random_range(0..all));
                        let in_first = e.iter().filter(|&&v| v < n1).count();
                        if in_first != 0 && in_first != m {
                            edges.push(e);
                            break;
                        }
                    }
                }
            }
        }
    }
    Hypergraph::new(n, edges)
}

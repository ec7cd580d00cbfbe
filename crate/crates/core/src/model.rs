//! Plackett-Luce model with dynamic covariates.
//!
//! The log score of object `k` in comparison `e` is `u_k + X_{e,k}' v`, and a
//! full ranking is generated by repeatedly choosing the next object with
//! probability proportional to `exp(score)` among those not yet ranked.
//!
//! All suffix normalizers `log sum_{t >= j} exp(s_t)` are evaluated by one
//! reverse log-sum-exp sweep over the ranked scores of a comparison.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{input, Error, Result};
use crate::hypergraph::Hypergraph;

/// Comparisons per chunk in parallel reductions. Partial sums are combined
/// in chunk order, so results are bit-identical for any thread count.
pub const REDUCTION_CHUNK: usize = 512;

/// Default `||X_{e,j}||_1` bound above which ingestion warns.
pub const DEFAULT_COVARIATE_BOUND: f64 = 50.0;

/// Model parameters `theta = (u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

impl Params {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { u: DVector::zeros(n), v: DVector::zeros(d) }
    }

    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Self {
        Self { u: DVector::from_vec(u), v: DVector::from_vec(v) }
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn d(&self) -> usize {
        self.v.len()
    }

    /// Subtracts the mean of `u`.
    pub fn center(&mut self) {
        if !self.u.is_empty() {
            let mean = self.u.mean();
            self.u.add_scalar_mut(-mean);
        }
    }

    /// Stacked vector `(u, v)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n() + self.d());
        out.rows_mut(0, self.n()).copy_from(&self.u);
        out.rows_mut(self.n(), self.d()).copy_from(&self.v);
        out
    }

    pub fn from_vector(theta: &DVector<f64>, n: usize) -> Self {
        Self {
            u: theta.rows(0, n).into_owned(),
            v: theta.rows(n, theta.len() - n).into_owned(),
        }
    }
}

/// One multiway comparison: a hyperedge, its per-object covariates, and the
/// observed ranking when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    edge: Vec<usize>,
    covariates: DMatrix<f64>,
    /// Positions into `edge`, winner first.
    ranking: Option<Vec<usize>>,
}

impl Comparison {
    /// `objects` may come in any order; row `j` of `covariates` belongs to
    /// `objects[j]`. `ranking`, when given, lists the objects winner first.
    pub fn new(
        objects: Vec<usize>,
        covariates: DMatrix<f64>,
        ranking: Option<Vec<usize>>,
    ) -> Result<Self> {
        let m = objects.len();
        if m < 2 {
            return input(format!("a comparison needs at least 2 objects, got {m}"));
        }
        if covariates.nrows() != m {
            return input(format!(
                "covariate matrix has {} rows for {m} objects",
                covariates.nrows()
            ));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&j| objects[j]);
        let edge: Vec<usize> = order.iter().map(|&j| objects[j]).collect();
        if edge.windows(2).any(|w| w[0] == w[1]) {
            return input("a comparison lists the same object twice");
        }
        let covariates = covariates.select_rows(order.iter());
        let mut c = Self { edge, covariates, ranking: None };
        if let Some(r) = ranking {
            c.set_ranking(&r)?;
        }
        Ok(c)
    }

    /// Sets the observed ranking (object ids, winner first).
    pub fn set_ranking(&mut self, ranking: &[usize]) -> Result<()> {
        self.ranking = Some(self.positions(ranking, true)?);
        Ok(())
    }

    pub fn clear_ranking(&mut self) {
        self.ranking = None;
    }

    /// Maps object ids to positions in the edge, rejecting non-members and
    /// repeats. With `full`, the list must be a permutation of the edge.
    fn positions(&self, objects: &[usize], full: bool) -> Result<Vec<usize>> {
        let mut seen = vec![false; self.edge.len()];
        let mut out = Vec::with_capacity(objects.len());
        for &k in objects {
            let j = self
                .edge
                .binary_search(&k)
                .or_else(|_| input(format!("object {k} is not part of this comparison")))?;
            if std::mem::replace(&mut seen[j], true) {
                return input(format!("object {k} appears twice in a ranking"));
            }
            out.push(j);
        }
        if full && out.len() != self.edge.len() {
            return input(format!(
                "ranking has {} objects but the comparison has {}",
                out.len(),
                self.edge.len()
            ));
        }
        Ok(out)
    }

    pub fn edge(&self) -> &[usize] {
        &self.edge
    }

    pub fn size(&self) -> usize {
        self.edge.len()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Covariate row of the object at edge position `j`.
    pub fn covariate_row(&self, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.covariates.rows(j, 1)
    }

    /// Observed ranking as edge positions, winner first.
    pub fn ranking_positions(&self) -> Option<&[usize]> {
        self.ranking.as_deref()
    }

    /// Observed ranking as object ids, winner first.
    pub fn ranking(&self) -> Option<Vec<usize>> {
        self.ranking.as_ref().map(|r| r.iter().map(|&j| self.edge[j]).collect())
    }

    /// Edge position of each object's rank (0 = winner).
    pub fn rank_of_position(&self) -> Option<Vec<usize>> {
        self.ranking.as_ref().map(|r| {
            let mut rank = vec![0; r.len()];
            for (t, &j) in r.iter().enumerate() {
                rank[j] = t;
            }
            rank
        })
    }

    /// Largest `||X_{e,j}||_1` over the objects of this comparison.
    pub fn max_covariate_l1(&self) -> f64 {
        self.covariates
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Same comparison restricted to the covariate columns in `keep`.
    pub fn select_covariates(&self, keep: &[usize]) -> Self {
        Self {
            edge: self.edge.clone(),
            covariates: self.covariates.select_columns(keep.iter()),
            ranking: self.ranking.clone(),
        }
    }
}

/// A set of comparisons over `n` objects with `d` covariates.
#[derive(Clone, Debug)]
pub struct Dataset {
    n: usize,
    d: usize,
    comparisons: Vec<Comparison>,
    graph: Hypergraph,
}

impl Dataset {
    pub fn new(n: usize, d: usize, comparisons: Vec<Comparison>) -> Result<Self> {
        for (i, c) in comparisons.iter().enumerate() {
            if c.d() != d {
                return input(format!("comparison {i} has {} covariates, expected {d}", c.d()));
            }
        }
        let graph = Hypergraph::new(n, comparisons.iter().map(|c| c.edge.clone()).collect())?;
        Ok(Self { n, d, comparisons, graph })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.comparisons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comparisons.is_empty()
    }

    pub fn comparisons(&self) -> &[Comparison] {
        &self.comparisons
    }

    pub fn graph(&self) -> &Hypergraph {
        &self.graph
    }

    /// Whether every comparison carries an observed ranking.
    pub fn has_outcomes(&self) -> bool {
        self.comparisons.iter().all(|c| c.ranking.is_some())
    }

    pub fn require_outcomes(&self) -> Result<()> {
        match self.comparisons.iter().position(|c| c.ranking.is_none()) {
            Some(i) => input(format!("comparison {i} has no observed ranking")),
            None => Ok(()),
        }
    }

    /// Number of comparisons with some `||X_{e,j}||_1 > bound`.
    pub fn covariate_bound_violations(&self, bound: f64) -> usize {
        self.comparisons.iter().filter(|c| c.max_covariate_l1() > bound).count()
    }

    /// Subset of comparisons by index, keeping `n` and `d`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.n,
            self.d,
            indices.iter().map(|&i| self.comparisons[i].clone()).collect(),
        )
    }

    /// Keeps only the covariate columns listed in `keep`.
    pub fn select_covariates(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&k| k >= self.d) {
            return input(format!("covariate index {bad} out of range for d = {}", self.d));
        }
        let comps = self.comparisons.iter().map(|c| c.select_covariates(keep)).collect();
        Self::new(self.n, keep.len(), comps)
    }
}

fn check_dims(theta: &Params, c: &Comparison) -> Result<()> {
    if theta.d() != c.d() {
        return input(format!(
            "parameter has d = {} but the comparison has {} covariates",
            theta.d(),
            c.d()
        ));
    }
    if let Some(&k) = c.edge.last() {
        if k >= theta.n() {
            return input(format!("object {k} outside parameter range n = {}", theta.n()));
        }
    }
    Ok(())
}

/// Log score `u_k + X_{e,k}' v` of the object at edge position `j`.
pub fn score(theta: &Params, c: &Comparison, j: usize) -> Result<f64> {
    check_dims(theta, c)?;
    if j >= c.size() {
        return input(format!("position {j} outside a comparison of size {}", c.size()));
    }
    Ok(score_unchecked(theta, c, j))
}

#[inline]
fn score_unchecked(theta: &Params, c: &Comparison, j: usize) -> f64 {
    let mut s = theta.u[c.edge[j]];
    for (x, v) in c.covariates.row(j).iter().zip(theta.v.iter()) {
        s += x * v;
    }
    s
}

/// Scores of every object in edge order.
pub fn scores(theta: &Params, c: &Comparison) -> Result<Vec<f64>> {
    check_dims(theta, c)?;
    Ok((0..c.size()).map(|j| score_unchecked(theta, c, j)).collect())
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Suffix normalizers `lse[j] = log sum_{t >= j} exp(s[t])` in one reverse sweep.
pub fn suffix_log_sum_exp(ranked: &[f64]) -> Vec<f64> {
    let mut lse = vec![0.0; ranked.len()];
    let mut acc = f64::NEG_INFINITY;
    for j in (0..ranked.len()).rev() {
        acc = log_add_exp(ranked[j], acc);
        lse[j] = acc;
    }
    lse
}

/// `sum_j (s_j - lse_j)` over the first `k` choices of a ranked score vector.
fn log_prob_prefix(ranked: &[f64], k: usize) -> f64 {
    let lse = suffix_log_sum_exp(ranked);
    (0..k).map(|j| ranked[j] - lse[j]).sum()
}

fn ranked_scores_at(scores: &[f64], order: &[usize]) -> Vec<f64> {
    order.iter().map(|&j| scores[j]).collect()
}

/// Log probability of a full ranking `pi` (object ids, winner first).
pub fn log_outcome_prob(theta: &Params, c: &Comparison, pi: &[usize]) -> Result<f64> {
    let s = scores(theta, c)?;
    let order = c.positions(pi, true)?;
    let ranked = ranked_scores_at(&s, &order);
    Ok(log_prob_prefix(&ranked, ranked.len()))
}

pub fn outcome_prob(theta: &Params, c: &Comparison, pi: &[usize]) -> Result<f64> {
    log_outcome_prob(theta, c, pi).map(f64::exp)
}

/// Log probability that the first `prefix.len()` places are exactly `prefix`.
pub fn log_top_k_prob(theta: &Params, c: &Comparison, prefix: &[usize]) -> Result<f64> {
    let s = scores(theta, c)?;
    let head = c.positions(prefix, false)?;
    // Complete the order with the unranked objects; they only enter through
    // the suffix sums, so their internal order is irrelevant.
    let mut order = head.clone();
    order.extend((0..c.size()).filter(|j| !head.contains(j)));
    let ranked = ranked_scores_at(&s, &order);
    Ok(log_prob_prefix(&ranked, head.len()))
}

pub fn top_k_prob(theta: &Params, c: &Comparison, prefix: &[usize]) -> Result<f64> {
    log_top_k_prob(theta, c, prefix).map(f64::exp)
}

/// Probability of each object being ranked first, in edge order.
pub fn win_probabilities(theta: &Params, c: &Comparison) -> Result<Vec<f64>> {
    let s = scores(theta, c)?;
    let lse = s.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
    Ok(s.iter().map(|x| (x - lse).exp()).collect())
}

/// Draws a ranking (object ids, winner first) by sequential choice.
pub fn sample_outcome<R: Rng + ?Sized>(theta: &Params, c: &Comparison, rng: &mut R) -> Result<Vec<usize>> {
    let s = scores(theta, c)?;
    let mut remaining: Vec<usize> = (0..c.size()).collect();
    let mut out = Vec::with_capacity(c.size());
    while remaining.len() > 1 {
        let max = remaining.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&j| (s[j] - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (idx, w) in weights.iter().enumerate() {
            if r < *w {
                pick = idx;
                break;
            }
            r -= w;
        }
        out.push(c.edge[remaining.remove(pick)]);
    }
    out.push(c.edge[remaining[0]]);
    Ok(out)
}

/// Per-comparison quantities shared by the likelihood, gradient, and Hessian.
pub(crate) struct RankedTerms {
    /// Scores in rank order.
    pub s: Vec<f64>,
    /// Suffix normalizers.
    pub lse: Vec<f64>,
}

impl RankedTerms {
    pub(crate) fn new(theta: &Params, c: &Comparison) -> Self {
        let order = c.ranking.as_ref().expect("ranking checked by caller");
        let s: Vec<f64> = order.iter().map(|&j| score_unchecked(theta, c, j)).collect();
        let lse = suffix_log_sum_exp(&s);
        Self { s, lse }
    }

    pub(crate) fn loglik(&self) -> f64 {
        self.s.iter().zip(&self.lse).map(|(s, l)| s - l).sum()
    }

    /// `d l / d s_t = 1 - sum_{j <= t} exp(s_t - lse_j)` for each rank `t`.
    /// The prefix sum is carried in log space so no term overflows.
    pub(crate) fn score_gradient(&self) -> Vec<f64> {
        let mut acc = f64::NEG_INFINITY;
        self.s
            .iter()
            .zip(&self.lse)
            .map(|(&s, &l)| {
                acc = log_add_exp(acc, -l);
                1.0 - (s + acc).exp()
            })
            .collect()
    }

    /// `d^2 l / ds ds'` assembled from the choice blocks: for each stage `j`,
    /// `-D_j' Lambda_j D_j` with `D_j` the difference rows `e_t - e_j`, `t > j`.
    pub(crate) fn score_hessian(&self) -> DMatrix<f64> {
        let m = self.s.len();
        let mut h = DMatrix::zeros(m, m);
        for j in 0..m.saturating_sub(1) {
            let g: Vec<f64> = ((j + 1)..m).map(|t| (self.s[t] - self.lse[j]).exp()).collect();
            let lambda = choice_lambda(&g);
            for (a, t) in ((j + 1)..m).enumerate() {
                for (b, tp) in ((j + 1)..m).enumerate() {
                    let w = lambda[(a, b)];
                    h[(t, tp)] -= w;
                    h[(t, j)] += w;
                    h[(j, tp)] += w;
                    h[(j, j)] -= w;
                }
            }
        }
        h
    }
}

/// `Lambda = diag(g) - g g'`.
pub fn choice_lambda(g: &[f64]) -> DMatrix<f64> {
    let k = g.len();
    DMatrix::from_fn(k, k, |a, b| if a == b { g[a] - g[a] * g[a] } else { -g[a] * g[b] })
}

fn chunked_sum<T, F, G>(items: &[Comparison], init: T, map: F, add: G) -> T
where
    T: Send + Clone,
    F: Fn(&[Comparison]) -> T + Sync + Send,
    G: Fn(T, T) -> T,
{
    if items.len() <= REDUCTION_CHUNK {
        return add(init, map(items));
    }
    let parts: Vec<T> = items.par_chunks(REDUCTION_CHUNK).map(&map).collect();
    parts.into_iter().fold(init, add)
}

fn check_dataset(theta: &Params, data: &Dataset) -> Result<()> {
    data.require_outcomes()?;
    if theta.n() != data.n() || theta.d() != data.d() {
        return input(format!(
            "parameter shape ({}, {}) does not match data ({}, {})",
            theta.n(),
            theta.d(),
            data.n(),
            data.d()
        ));
    }
    Ok(())
}

/// `l(theta) = sum_i sum_j [s_ij - log sum_{t >= j} exp(s_it)]`, divided by
/// the number of comparisons when `normalized`.
pub fn log_likelihood(theta: &Params, data: &Dataset, normalized: bool) -> Result<f64> {
    check_dataset(theta, data)?;
    let total = log_likelihood_unchecked(theta, data.comparisons());
    Ok(if normalized { total / data.len().max(1) as f64 } else { total })
}

pub(crate) fn log_likelihood_unchecked(theta: &Params, comps: &[Comparison]) -> f64 {
    chunked_sum(
        comps,
        0.0,
        |chunk| chunk.iter().map(|c| RankedTerms::new(theta, c).loglik()).sum::<f64>(),
        |a, b| a + b,
    )
}

/// Gradient with respect to `(u, v)`, length `n + d`.
pub fn gradient(theta: &Params, data: &Dataset) -> Result<DVector<f64>> {
    check_dataset(theta, data)?;
    Ok(gradient_unchecked(theta, data.comparisons()))
}

pub(crate) fn gradient_unchecked(theta: &Params, comps: &[Comparison]) -> DVector<f64> {
    let (n, d) = (theta.n(), theta.d());
    chunked_sum(
        comps,
        DVector::zeros(n + d),
        |chunk| {
            let mut g = DVector::zeros(n + d);
            for c in chunk {
                let terms = RankedTerms::new(theta, c);
                let order = c.ranking.as_ref().unwrap();
                for (t, ds) in terms.score_gradient().into_iter().enumerate() {
                    let j = order[t];
                    g[c.edge[j]] += ds;
                    for (k, x) in c.covariates.row(j).iter().enumerate() {
                        g[n + k] += ds * x;
                    }
                }
            }
            g
        },
        |a, b| a + b,
    )
}

/// Hessian with respect to `(u, v)`, `(n + d) x (n + d)`; negative semidefinite.
pub fn hessian(theta: &Params, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dataset(theta, data)?;
    Ok(hessian_unchecked(theta, data.comparisons()))
}

pub(crate) fn hessian_unchecked(theta: &Params, comps: &[Comparison]) -> DMatrix<f64> {
    let (n, d) = (theta.n(), theta.d());
    let p = n + d;
    chunked_sum(
        comps,
        DMatrix::zeros(p, p),
        |chunk| {
            let mut h = DMatrix::zeros(p, p);
            for c in chunk {
                let terms = RankedTerms::new(theta, c);
                let hs = terms.score_hessian();
                let order = c.ranking.as_ref().unwrap();
                let m = order.len();
                // Rows a_t = (e_{pi(t)}, X_{pi(t)}); H += A' hs A.
                let x = c.covariates.select_rows(order.iter());
                let hx = &hs * &x;
                for t in 0..m {
                    let kt = c.edge[order[t]];
                    for tp in 0..m {
                        h[(kt, c.edge[order[tp]])] += hs[(t, tp)];
                    }
                    for k in 0..d {
                        h[(kt, n + k)] += hx[(t, k)];
                        h[(n + k, kt)] += hx[(t, k)];
                    }
                }
                let xhx = x.transpose() * hx;
                let mut vv = h.view_mut((n, n), (d, d));
                vv += xhx;
            }
            h
        },
        |a, b| a + b,
    )
}

/// Checks that every object referenced by `c` exists for parameter size `n`.
pub fn ensure_known_objects(c: &Comparison, n: usize) -> Result<()> {
    match c.edge.iter().find(|&&k| k >= n) {
        Some(&k) => Err(Error::Input(format!("unknown object id {}", k + 1))),
        None => Ok(()),
    }
}

//! Design matrices of the star breaking and the identifiability checks
//! built on them.
//!
//! Every comparison on `e = {j_1 < ... < j_m}` is broken into the pairs
//! `(j_1, j_t)`, `t = 2..m`. `Q` is the signed vertex-by-pair incidence
//! matrix (source `-1`, target `+1`), `K` stacks the covariate differences
//! `X_{e,j_t} - X_{e,j_1}`, and `W = [Q', K]`. The model is identifiable iff
//! `rank(W) = n + d - 1`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{input, Error, Result};
use crate::hypergraph::Hypergraph;
use crate::model::{Comparison, Dataset};

/// Above this many unknowns the rank test leaves dense SVD.
pub const DENSE_RANK_CAP: usize = 5000;
/// Dense SVD is also skipped when `W` would hold more entries than this.
pub const DENSE_ENTRY_CAP: usize = 30_000_000;
/// Triangles enumerated before the curl search becomes inconclusive.
pub const TRIANGLE_CAP: usize = 5000;

/// Relative rank threshold factor; multiplied by `max(N_br, n + d)`.
pub const RANK_TAU: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct DesignMatrices {
    n: usize,
    d: usize,
    /// Breaking pairs `(source, target)` with `source < target`.
    pairs: Vec<(usize, usize)>,
    /// Comparison index of each pair.
    source_edge: Vec<usize>,
    k: DMatrix<f64>,
}

/// Rows `X_{e,j_t} - X_{e,j_1}`, `t = 2..m`, anchored at the smallest vertex.
pub fn delta_x(c: &Comparison) -> DMatrix<f64> {
    let x = c.covariates();
    let m = c.size();
    DMatrix::from_fn(m - 1, c.d(), |r, col| x[(r + 1, col)] - x[(0, col)])
}

pub fn assemble(data: &Dataset) -> Result<DesignMatrices> {
    let d = data.d();
    let n_br: usize = data.comparisons().iter().map(|c| c.size() - 1).sum();
    let mut pairs = Vec::with_capacity(n_br);
    let mut source_edge = Vec::with_capacity(n_br);
    let mut k = DMatrix::zeros(n_br, d);
    let mut row = 0;
    for (i, c) in data.comparisons().iter().enumerate() {
        if c.d() != d {
            return input(format!("comparison {i} has {} covariates, expected {d}", c.d()));
        }
        let dx = delta_x(c);
        k.rows_mut(row, dx.nrows()).copy_from(&dx);
        for &t in &c.edge()[1..] {
            pairs.push((c.edge()[0], t));
            source_edge.push(i);
        }
        row += dx.nrows();
    }
    Ok(DesignMatrices { n: data.n(), d, pairs, source_edge, k })
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of breaking pairs `N_br`.
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn source_edge(&self) -> &[usize] {
        &self.source_edge
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Dense `n x N_br` incidence matrix.
    pub fn q(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.pairs.len());
        for (r, &(s, t)) in self.pairs.iter().enumerate() {
            q[(s, r)] = -1.0;
            q[(t, r)] = 1.0;
        }
        q
    }

    /// Dense `N_br x (n + d)` matrix `[Q', K]`.
    pub fn w(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.pairs.len(), self.n + self.d);
        for (r, &(s, t)) in self.pairs.iter().enumerate() {
            w[(r, s)] = -1.0;
            w[(r, t)] = 1.0;
        }
        w.columns_mut(self.n, self.d).copy_from(&self.k);
        w
    }

    /// `W x` without materializing `W`.
    fn w_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let kv = &self.k * x.rows(self.n, self.d);
        DVector::from_fn(self.pairs.len(), |r, _| {
            let (s, t) = self.pairs[r];
            x[t] - x[s] + kv[r]
        })
    }

    /// `W' y` without materializing `W`.
    fn wt_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n + self.d);
        for (r, &(s, t)) in self.pairs.iter().enumerate() {
            out[s] -= y[r];
            out[t] += y[r];
        }
        let kt = self.k.tr_mul(y);
        out.rows_mut(self.n, self.d).copy_from(&kt);
        out
    }

    fn rank_threshold_factor(&self) -> f64 {
        RANK_TAU * self.pairs.len().max(self.n + self.d) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    DenseSvd,
    /// Exact incidence rank from connected components plus the rank of `K`
    /// projected off `range(Q')`, computed with conjugate-gradient Laplacian solves.
    LaplacianProjection,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentifiabilityReport {
    pub identifiable: bool,
    pub rank: usize,
    pub required_rank: usize,
    pub method: RankMethod,
    /// Kernel vector of `W` orthogonal to `(1, 0)` when not identifiable.
    pub witness: Option<Vec<f64>>,
}

pub fn identifiability_check(dm: &DesignMatrices) -> IdentifiabilityReport {
    let p = dm.n + dm.d;
    if p <= DENSE_RANK_CAP && dm.pairs.len().max(p).saturating_mul(p) <= DENSE_ENTRY_CAP {
        dense_rank_check(dm)
    } else {
        projection_rank_check(dm)
    }
}

/// Forces the method; used to cross-check the two routes.
pub fn identifiability_check_with(dm: &DesignMatrices, method: RankMethod) -> IdentifiabilityReport {
    match method {
        RankMethod::DenseSvd => dense_rank_check(dm),
        RankMethod::LaplacianProjection => projection_rank_check(dm),
    }
}

fn constant_direction(n: usize, d: usize) -> DVector<f64> {
    let mut c = DVector::zeros(n + d);
    if n > 0 {
        c.rows_mut(0, n).fill(1.0 / (n as f64).sqrt());
    }
    c
}

fn dense_rank_check(dm: &DesignMatrices) -> IdentifiabilityReport {
    let p = dm.n + dm.d;
    let required = p.saturating_sub(1);
    let mut w = dm.w();
    if w.nrows() < p {
        // Pad so the SVD returns a full right basis including the kernel.
        w = w.resize_vertically(p, 0.0);
    }
    let svd = w.svd(false, true);
    let sigma = &svd.singular_values;
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let thr = dm.rank_threshold_factor() * smax;
    let rank = sigma.iter().filter(|&&s| s > thr).count();
    let identifiable = rank == required && smax > 0.0;
    let witness = if identifiable {
        None
    } else {
        let vt = svd.v_t.expect("requested right singular vectors");
        let c = constant_direction(dm.n, dm.d);
        let mut best: Option<DVector<f64>> = None;
        for (i, &s) in sigma.iter().enumerate() {
            if s <= thr {
                let v = vt.row(i).transpose();
                let r = &v - &c * c.dot(&v);
                if best.as_ref().is_none_or(|b| r.norm() > b.norm()) {
                    best = Some(r);
                }
            }
        }
        best.filter(|b| b.norm() > 1e-8).map(|b| b.normalize().iter().copied().collect())
    };
    IdentifiabilityReport { identifiable, rank, required_rank: required, method: RankMethod::DenseSvd, witness }
}

/// Connected components of the pair skeleton.
fn components(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(s, t) in pairs {
        let (a, b) = (find(&mut parent, s), find(&mut parent, t));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for k in 0..n {
        let r = find(&mut parent, k);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        out[k] = label[r];
    }
    out
}

/// Solves `Q Q' y = b` for `b` orthogonal to each component's indicator,
/// returning the minimum-norm solution.
pub(crate) struct LaplacianSolver<'a> {
    n: usize,
    pairs: &'a [(usize, usize)],
}

impl<'a> LaplacianSolver<'a> {
    pub(crate) fn new(n: usize, pairs: &'a [(usize, usize)]) -> Self {
        Self { n, pairs }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for &(s, t) in self.pairs {
            let f = x[t] - x[s];
            out[t] += f;
            out[s] -= f;
        }
        out
    }

    /// `Q f` for a pair flow `f`.
    pub(crate) fn divergence(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (r, &(s, t)) in self.pairs.iter().enumerate() {
            out[t] += f[r];
            out[s] -= f[r];
        }
        out
    }

    /// `Q' y`.
    pub(crate) fn gradient_flow(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.pairs.len(), |r, _| {
            let (s, t) = self.pairs[r];
            y[t] - y[s]
        })
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        let mut r = b.clone();
        let bnorm = b.norm();
        if bnorm == 0.0 {
            return x;
        }
        let mut p = r.clone();
        let mut rr = r.dot(&r);
        for _ in 0..(10 * self.n + 100) {
            let ap = self.apply(&p);
            let pap = p.dot(&ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            let rr_new = r.dot(&r);
            if rr_new.sqrt() <= 1e-13 * bnorm {
                break;
            }
            p = &r + &p * (rr_new / rr);
            rr = rr_new;
        }
        x
    }

    /// Orthogonal projection of a pair flow onto `range(Q')`.
    pub(crate) fn project(&self, f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = self.solve(&self.divergence(f));
        (self.gradient_flow(&y), y)
    }
}

fn sigma_max_estimate(dm: &DesignMatrices) -> f64 {
    let p = dm.n + dm.d;
    let mut x = DVector::from_fn(p, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    let mut est = 0.0;
    for _ in 0..60 {
        let norm = x.norm();
        if norm == 0.0 {
            return 0.0;
        }
        x /= norm;
        let y = dm.wt_mul(&dm.w_mul(&x));
        est = x.dot(&y).max(0.0).sqrt();
        x = y;
    }
    est
}

fn projection_rank_check(dm: &DesignMatrices) -> IdentifiabilityReport {
    let (n, d) = (dm.n, dm.d);
    let required = (n + d).saturating_sub(1);
    let comp = components(n, &dm.pairs);
    let num_comp = comp.iter().copied().max().map_or(0, |c| c + 1);
    let q_rank = n - num_comp;
    let solver = LaplacianSolver::new(n, &dm.pairs);
    let mut resid = DMatrix::zeros(dm.pairs.len(), d);
    let mut pot = DMatrix::zeros(n, d);
    for col in 0..d {
        let f = dm.k.column(col).into_owned();
        let (proj, y) = solver.project(&f);
        resid.set_column(col, &(f - proj));
        pot.set_column(col, &y);
    }
    let thr = dm.rank_threshold_factor() * sigma_max_estimate(dm);
    let (k_rank, null_beta) = if d == 0 {
        (0, None)
    } else {
        let svd = resid.clone().svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let rank = svd.singular_values.iter().filter(|&&s| s > thr).count();
        let beta = svd
            .singular_values
            .iter()
            .enumerate()
            .find(|(_, &s)| s <= thr)
            .map(|(i, _)| vt.row(i).transpose());
        (rank, beta)
    };
    let rank = q_rank + k_rank;
    let identifiable = rank == required;
    let witness = if identifiable {
        None
    } else if num_comp > 1 {
        // Indicator of the first component, centered.
        let size = comp.iter().filter(|&&c| c == 0).count() as f64;
        let mut w = DVector::zeros(n + d);
        for k in 0..n {
            w[k] = if comp[k] == 0 { 1.0 } else { 0.0 } - size / n as f64;
        }
        Some(w.normalize().iter().copied().collect())
    } else {
        null_beta.map(|beta| {
            // K beta = Q' y, so (-y, beta) lies in the kernel of W.
            let y = &pot * &beta;
            let mut w = DVector::zeros(n + d);
            let mean = y.mean();
            for k in 0..n {
                w[k] = -(y[k] - mean);
            }
            w.rows_mut(n, d).copy_from(&beta);
            w.normalize().iter().copied().collect()
        })
    };
    IdentifiabilityReport {
        identifiable,
        rank,
        required_rank: required,
        method: RankMethod::LaplacianProjection,
        witness,
    }
}

/// Whether the incidence part alone has rank `n - 1`.
pub fn incidence_rank(dm: &DesignMatrices) -> usize {
    let comp = components(dm.n, &dm.pairs);
    dm.n - comp.iter().copied().max().map_or(0, |c| c + 1)
}

/// Vertex triple `i < j < k` whose three pairs all occur in the breaking.
pub type Triangle = [usize; 3];

/// First breaking row carrying each unordered pair.
fn pair_index(dm: &DesignMatrices) -> HashMap<(usize, usize), usize> {
    let mut map = HashMap::with_capacity(dm.pairs.len());
    for (r, &p) in dm.pairs.iter().enumerate() {
        map.entry(p).or_insert(r);
    }
    map
}

/// Triangles of the simple skeleton in lexicographic order, at most `cap`.
/// The flag reports whether enumeration stopped at the cap.
pub fn triangles(dm: &DesignMatrices, cap: usize) -> (Vec<Triangle>, bool) {
    let index = pair_index(dm);
    let mut up: Vec<Vec<usize>> = vec![Vec::new(); dm.n];
    for &(s, t) in index.keys() {
        up[s].push(t);
    }
    for list in &mut up {
        list.sort_unstable();
    }
    let mut out = Vec::new();
    for i in 0..dm.n {
        for &j in &up[i] {
            for &k in &up[j] {
                if index.contains_key(&(i, k)) {
                    if out.len() == cap {
                        return (out, true);
                    }
                    out.push([i, j, k]);
                }
            }
        }
    }
    (out, false)
}

/// Curl of every column of `K` on each triangle: `f(i,j) + f(j,k) - f(i,k)`.
/// Returns an error if a triangle's pairs are absent from the breaking.
pub fn curl_matrix(dm: &DesignMatrices, tris: &[Triangle]) -> Result<DMatrix<f64>> {
    let index = pair_index(dm);
    let mut t = DMatrix::zeros(tris.len(), dm.d);
    for (row, &[i, j, k]) in tris.iter().enumerate() {
        let look = |a: usize, b: usize| {
            index
                .get(&(a, b))
                .copied()
                .ok_or_else(|| Error::Input(format!("pair ({}, {}) is not in the breaking", a + 1, b + 1)))
        };
        let (ij, jk, ik) = (look(i, j)?, look(j, k)?, look(i, k)?);
        for col in 0..dm.d {
            t[(row, col)] = dm.k[(ij, col)] + dm.k[(jk, col)] - dm.k[(ik, col)];
        }
    }
    Ok(t)
}

/// The same curl values taken directly from the raw covariates of the first
/// comparison that carries each pair.
pub fn curl_from_covariates(data: &Dataset, tris: &[Triangle]) -> Result<DMatrix<f64>> {
    let flow = |a: usize, b: usize| -> Result<Vec<f64>> {
        for c in data.comparisons() {
            let e = c.edge();
            if e[0] == a {
                if let Ok(pos) = e.binary_search(&b) {
                    let x = c.covariates();
                    return Ok((0..c.d()).map(|col| x[(pos, col)] - x[(0, col)]).collect());
                }
            }
        }
        input(format!("pair ({}, {}) is not in the breaking", a + 1, b + 1))
    };
    let mut t = DMatrix::zeros(tris.len(), data.d());
    for (row, &[i, j, k]) in tris.iter().enumerate() {
        let (ij, jk, ik) = (flow(i, j)?, flow(j, k)?, flow(i, k)?);
        for col in 0..data.d() {
            t[(row, col)] = ij[col] + jk[col] - ik[col];
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurlStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurlReport {
    pub status: CurlStatus,
    /// Witness triangles (0-based) when the check passes.
    pub triangles: Vec<Triangle>,
    /// `det(T)` over the witness triangles.
    pub det: Option<f64>,
    pub triangles_examined: usize,
    pub reason: Option<String>,
}

impl CurlReport {
    pub fn passes(&self) -> bool {
        self.status == CurlStatus::Pass
    }
}

/// Searches for `d` triangles with a nonsingular curl matrix. Rows are
/// accepted greedily; since row rank is attained by some `d` rows, the
/// greedy search is exhaustive over the enumerated triangles.
pub fn curl_sufficient_check(dm: &DesignMatrices, g: &Hypergraph) -> Result<CurlReport> {
    curl_sufficient_check_with_cap(dm, g, TRIANGLE_CAP)
}

pub fn curl_sufficient_check_with_cap(dm: &DesignMatrices, g: &Hypergraph, cap: usize) -> Result<CurlReport> {
    let d = dm.d;
    if d == 0 {
        return input("the curl check needs at least one covariate");
    }
    let fail = |status, examined, reason: &str| CurlReport {
        status,
        triangles: Vec::new(),
        det: None,
        triangles_examined: examined,
        reason: Some(reason.to_string()),
    };
    if !g.is_connected() {
        return Ok(fail(CurlStatus::Fail, 0, "graph is disconnected"));
    }
    let (tris, truncated) = triangles(dm, cap);
    if tris.is_empty() {
        return Ok(fail(CurlStatus::Fail, 0, "the breaking has no triangles"));
    }
    let curls = curl_matrix(dm, &tris)?;
    // Relative to the flows, so rounding noise on exact zeros is not a witness.
    let scale = dm.k.amax().max(f64::MIN_POSITIVE);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    let mut chosen = Vec::with_capacity(d);
    for (row, tri) in tris.iter().enumerate() {
        let mut r = curls.row(row).transpose();
        for b in &basis {
            let c = b.dot(&r);
            r.axpy(-c, b, 1.0);
        }
        if r.norm() > 1e-9 * scale {
            basis.push(r.normalize());
            chosen.push(*tri);
            if chosen.len() == d {
                break;
            }
        }
    }
    if chosen.len() < d {
        let (status, reason) = if truncated {
            (CurlStatus::Inconclusive, "triangle cap reached without a full-rank witness")
        } else {
            (CurlStatus::Fail, "curl matrix over all triangles has rank below d")
        };
        return Ok(fail(status, tris.len(), reason));
    }
    let det = curl_matrix(dm, &chosen)?.determinant();
    Ok(CurlReport {
        status: CurlStatus::Pass,
        triangles: chosen,
        det: Some(det),
        triangles_examined: tris.len(),
        reason: None,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyDiagnostics {
    /// `sigma_min(K) / sqrt(N_br)`.
    pub sigma_min_k: f64,
    /// Largest cosine between `range(Q')` and `range(K)`.
    pub incoherence_cos: f64,
}

pub fn consistency_diagnostics(dm: &DesignMatrices) -> Result<ConsistencyDiagnostics> {
    let n_br = dm.pairs.len();
    if n_br == 0 {
        return input("no breaking pairs");
    }
    if dm.d == 0 {
        return Ok(ConsistencyDiagnostics { sigma_min_k: 0.0, incoherence_cos: 0.0 });
    }
    let svd = dm.k.clone().svd(true, false);
    let sigma = &svd.singular_values;
    let smin = if n_br < dm.d { 0.0 } else { sigma.iter().copied().fold(f64::INFINITY, f64::min) };
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let u = svd.u.expect("requested left singular vectors");
    // Orthonormal basis of range(K).
    let thr = dm.rank_threshold_factor() * smax;
    let cols: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > thr).collect();
    let incoherence = if cols.is_empty() {
        0.0
    } else {
        let solver = LaplacianSolver::new(dm.n, &dm.pairs);
        let mut proj = DMatrix::zeros(n_br, cols.len());
        for (c, &i) in cols.iter().enumerate() {
            let (p, _) = solver.project(&u.column(i).into_owned());
            proj.set_column(c, &p);
        }
        proj.singular_values().iter().copied().fold(0.0, f64::max).min(1.0)
    };
    Ok(ConsistencyDiagnostics { sigma_min_k: smin / (n_br as f64).sqrt(), incoherence_cos: incoherence })
}

/// Maps a plain utility estimate `u_tilde` and static covariates `Z` to the
/// equivalent covariate model with `1'u = 0` and `Z'u = 0`.
pub fn care_equivalence(z: &DMatrix<f64>, u_tilde: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, d) = z.shape();
    if u_tilde.len() != n {
        return input(format!("u has length {} but Z has {n} rows", u_tilde.len()));
    }
    if d == 0 {
        return Ok((u_tilde.clone(), DVector::zeros(0)));
    }
    let sv = z.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = 1e-10 * n.max(d) as f64 * smax;
    if sv.iter().filter(|&&s| s > tol).count() < d || smax == 0.0 {
        return Err(Error::Precondition("Z does not have full column rank d".into()));
    }
    let ones = DVector::from_element(n, 1.0);
    let coef = z.clone().svd(true, true).solve(&ones, tol).map_err(|e| Error::Numeric(e.into()))?;
    if (z * coef - &ones).norm() <= 1e-8 * (n as f64).sqrt() {
        return Err(Error::Precondition("the all-ones vector lies in range(Z)".into()));
    }
    let col_means = z.row_mean();
    let zc = DMatrix::from_fn(n, d, |i, j| z[(i, j)] - col_means[j]);
    let normal = zc.tr_mul(&zc);
    let rhs = z.tr_mul(u_tilde);
    let v_hat = normal
        .cholesky()
        .ok_or_else(|| Error::Precondition("Z'Z - Z'11'Z/n is singular".into()))?
        .solve(&rhs);
    let u_hat = u_tilde - zc * &v_hat;
    Ok((u_hat, v_hat))
}

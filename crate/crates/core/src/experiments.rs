//! Reproducible studies: the synthetic consistency experiment, k-fold
//! cross-entropy validation, covariate-subset selection, and RBF features.
//!
//! Every replicate and fold draws from its own ChaCha stream derived from the
//! run seed, so results are identical for any thread count.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::estimate::{self, Existence, FitConfig, FitResult};
use crate::hypergraph::Hypergraph;
use crate::model::{self, Comparison, Dataset, Params};
use crate::randgraph::{self, ExperimentDesign};
use crate::rng::{self, SimRng};

/// Draws `u` uniform on `[-half, half]` and centers it.
pub fn draw_utilities(rng: &mut SimRng, n: usize, half: f64) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-half..=half)).collect();
    let mean = u.iter().sum::<f64>() / n.max(1) as f64;
    u.iter_mut().for_each(|x| *x -= mean);
    u
}

/// Attaches i.i.d. standard normal covariates to every object of every edge
/// and samples an outcome per edge from the model at `theta`.
pub fn simulate_comparisons(graph: &Hypergraph, theta: &Params, rng: &mut SimRng) -> Result<Dataset> {
    if theta.n() != graph.n() {
        return input(format!("theta has {} utilities for {} objects", theta.n(), graph.n()));
    }
    let d = theta.d();
    let mut comps = Vec::with_capacity(graph.num_edges());
    for e in graph.edges() {
        let x = DMatrix::from_fn(e.len(), d, |_, _| StandardNormal.sample(rng));
        let mut c = Comparison::new(e.clone(), x, None)?;
        let pi = model::sample_outcome(theta, &c, rng)?;
        c.set_ranking(&pi)?;
        comps.push(c);
    }
    Dataset::new(graph.n(), d, comps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencySpec {
    pub design: ExperimentDesign,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub v_star: Vec<f64>,
    /// Half-width of the uniform law of `u*` before centering.
    pub u_half_width: f64,
    pub seed: u64,
}

impl ConsistencySpec {
    pub fn new(design: ExperimentDesign, n_list: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self { design, n_list, reps, v_star: vec![1.0, -0.5, 0.0], u_half_width: 0.5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return input("reps must be at least 1");
        }
        if self.n_list.is_empty() {
            return input("n_list is empty");
        }
        if self.n_list.iter().any(|&n| n < 2) {
            return input("every n must be at least 2");
        }
        if !self.u_half_width.is_finite() || self.u_half_width < 0.0 || self.v_star.iter().any(|x| !x.is_finite()) {
            return input("u_half_width and v_star must be finite, with u_half_width >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateStatus {
    Ok,
    Nonexistent,
    Unconverged,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicateRow {
    pub n: usize,
    pub rep: usize,
    pub edges: usize,
    pub status: ReplicateStatus,
    pub err_u_inf: f64,
    pub err_v_inf: f64,
    pub outer_iters: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencySummaryRow {
    pub n: usize,
    pub edges: usize,
    pub ok: usize,
    pub failed: usize,
    pub mean_err_u_inf: Option<f64>,
    pub sd_err_u_inf: Option<f64>,
    pub mean_err_v_inf: Option<f64>,
    pub sd_err_v_inf: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub spec: ConsistencySpec,
    pub rng: &'static str,
    /// Standard deviations divide by `ok - 1`.
    pub sd_normalization: &'static str,
    pub summary: Vec<ConsistencySummaryRow>,
    #[serde(skip)]
    pub rows: Vec<ReplicateRow>,
}

/// Mean and sample standard deviation; the latter needs two values.
pub fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
    (Some(mean), sd)
}

fn one_replicate(spec: &ConsistencySpec, cfg: &FitConfig, n_idx: usize, rep: usize) -> Result<ReplicateRow> {
    let n = spec.n_list[n_idx];
    let stream = (n_idx * spec.reps + rep) as u64;
    let mut rng = rng::substream(spec.seed, stream);
    let edges = spec.design.edge_count(n);
    let graph = randgraph::sample_experiment_design(spec.design, n, edges, &mut rng)?;
    let u_star = draw_utilities(&mut rng, n, spec.u_half_width);
    let theta_star = Params::new(u_star, spec.v_star.clone());
    let data = simulate_comparisons(&graph, &theta_star, &mut rng)?;
    // A vertex missing from every sampled edge has no MLE.
    if data.graph().degrees().contains(&0) {
        return Ok(ReplicateRow {
            n,
            rep,
            edges,
            status: ReplicateStatus::Nonexistent,
            err_u_inf: f64::NAN,
            err_v_inf: f64::NAN,
            outer_iters: 0,
        });
    }
    let fit = estimate::fit(&data, cfg)?;
    let status = if fit.existence.status == Existence::Nonexistent {
        ReplicateStatus::Nonexistent
    } else if !fit.converged {
        ReplicateStatus::Unconverged
    } else {
        ReplicateStatus::Ok
    };
    Ok(ReplicateRow {
        n,
        rep,
        edges,
        status,
        err_u_inf: (&fit.theta.u - &theta_star.u).amax(),
        err_v_inf: if theta_star.d() == 0 { 0.0 } else { (&fit.theta.v - &theta_star.v).amax() },
        outer_iters: fit.outer_iters,
    })
}

/// Runs every `(n, rep)` pair. Failed replicates (nonexistent MLE or no
/// convergence) are kept in `rows` and excluded from the summary means.
pub fn run_consistency(spec: &ConsistencySpec, cfg: &FitConfig) -> Result<ConsistencyReport> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.n_list.len()).flat_map(|i| (0..spec.reps).map(move |r| (i, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, r)| one_replicate(spec, cfg, i, r))
        .collect::<Result<Vec<_>>>()?;
    let summary = spec
        .n_list
        .iter()
        .map(|&n| {
            let here: Vec<&ReplicateRow> = rows.iter().filter(|r| r.n == n).collect();
            let ok: Vec<&&ReplicateRow> = here.iter().filter(|r| r.status == ReplicateStatus::Ok).collect();
            let eu: Vec<f64> = ok.iter().map(|r| r.err_u_inf).collect();
            let ev: Vec<f64> = ok.iter().map(|r| r.err_v_inf).collect();
            let (mean_u, sd_u) = mean_sd(&eu);
            let (mean_v, sd_v) = mean_sd(&ev);
            ConsistencySummaryRow {
                n,
                edges: spec.design.edge_count(n),
                ok: ok.len(),
                failed: here.len() - ok.len(),
                mean_err_u_inf: mean_u,
                sd_err_u_inf: sd_u,
                mean_err_v_inf: mean_v,
                sd_err_v_inf: sd_v,
            }
        })
        .collect();
    Ok(ConsistencyReport {
        spec: spec.clone(),
        rng: rng::RNG_NAME,
        sd_normalization: "sample",
        summary,
        rows,
    })
}

/// Tidy CSV: one row per replicate and metric.
pub fn write_consistency_csv<W: Write>(writer: W, report: &ConsistencyReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["design", "n", "rep", "edges", "status", "metric", "value"])?;
    let design = report.spec.design.to_string();
    for r in &report.rows {
        let status = serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string();
        for (metric, value) in [("err_u_inf", r.err_u_inf), ("err_v_inf", r.err_v_inf)] {
            w.write_record([
                design.clone(),
                r.n.to_string(),
                r.rep.to_string(),
                r.edges.to_string(),
                status.clone(),
                metric.to_string(),
                if value.is_finite() { value.to_string() } else { String::new() },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    Top1,
    Top3,
    Full,
}

impl FromStr for CvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Self::Top1),
            "top3" => Ok(Self::Top3),
            "full" => Ok(Self::Full),
            other => input(format!("unknown mode '{other}' (expected top1, top3 or full)")),
        }
    }
}

impl std::fmt::Display for CvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Top1 => "top1",
            Self::Top3 => "top3",
            Self::Full => "full",
        })
    }
}

/// `-log` probability of the observed outcome under `mode`. Top-k modes use
/// the first `min(k, m)` ranked objects.
pub fn comparison_cross_entropy(theta: &Params, c: &Comparison, mode: CvMode) -> Result<f64> {
    let ranking = c.ranking().ok_or_else(|| Error::Input("comparison has no observed ranking".into()))?;
    let lp = match mode {
        CvMode::Top1 => model::log_top_k_prob(theta, c, &ranking[..1])?,
        CvMode::Top3 => model::log_top_k_prob(theta, c, &ranking[..3.min(ranking.len())])?,
        CvMode::Full => model::log_outcome_prob(theta, c, &ranking)?,
    };
    Ok(-lp)
}

/// Mean cross-entropy over all comparisons of `data`.
pub fn cross_entropy(theta: &Params, data: &Dataset, mode: CvMode) -> Result<f64> {
    if data.is_empty() {
        return input("no comparisons to evaluate");
    }
    let mut total = 0.0;
    for c in data.comparisons() {
        total += comparison_cross_entropy(theta, c, mode)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvSpec {
    pub k: usize,
    pub modes: Vec<CvMode>,
    pub seed: u64,
    pub max_retries: usize,
}

impl CvSpec {
    pub fn new(k: usize, modes: Vec<CvMode>, seed: u64) -> Self {
        Self { k, modes, seed, max_retries: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvModel {
    Plusdc,
    Pl,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvRow {
    pub fold: usize,
    pub model: CvModel,
    pub mode: CvMode,
    pub n_test: usize,
    pub cross_entropy: f64,
    /// Held-out comparisons containing an object unseen in training, scored
    /// with that object's utility at 0.
    pub cold_start: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvSummaryRow {
    pub model: CvModel,
    pub mode: CvMode,
    pub mean_cross_entropy: f64,
    pub sd_cross_entropy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub spec: CvSpec,
    pub attempts: usize,
    pub folds: Vec<Vec<usize>>,
    pub summary: Vec<CvSummaryRow>,
    #[serde(skip)]
    pub rows: Vec<CvRow>,
}

/// Random equal partition of `0..num` into `k` folds; the last fold takes
/// the remainder.
pub fn partition(num: usize, k: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..num).collect();
    idx.shuffle(rng);
    let size = num / k;
    (0..k)
        .map(|f| {
            let end = if f + 1 == k { num } else { (f + 1) * size };
            let mut fold = idx[f * size..end].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect()
}

fn training_covers(data: &Dataset, test: &[usize]) -> bool {
    let mut held = vec![false; data.len()];
    test.iter().for_each(|&i| held[i] = true);
    let mut deg = vec![0usize; data.n()];
    for (i, c) in data.comparisons().iter().enumerate() {
        if !held[i] {
            c.edge().iter().for_each(|&k| deg[k] += 1);
        }
    }
    let full = data.graph().degrees();
    deg.iter().zip(&full).all(|(&t, &f)| f == 0 || t > 0)
}

/// Fits on `train`, padding objects absent from it with utility 0.
fn fit_padded(data: &Dataset, train: &[usize], cfg: &FitConfig) -> Result<(Params, bool, Vec<bool>)> {
    let sub = data.subset(train)?;
    let degrees = sub.graph().degrees();
    let present: Vec<bool> = degrees.iter().map(|&d| d > 0).collect();
    let map: Vec<Option<usize>> = present
        .iter()
        .scan(0, |next, &p| {
            Some(p.then(|| {
                *next += 1;
                *next - 1
            }))
        })
        .collect();
    let kept = present.iter().filter(|&&p| p).count();
    let comps = sub
        .comparisons()
        .iter()
        .map(|c| {
            let objects = c.edge().iter().map(|&k| map[k].expect("present")).collect();
            let ranking = c.ranking().map(|r| r.iter().map(|&k| map[k].expect("present")).collect());
            Comparison::new(objects, c.covariates().clone(), ranking)
        })
        .collect::<Result<Vec<_>>>()?;
    let small = Dataset::new(kept, data.d(), comps)?;
    let fit = estimate::fit(&small, cfg)?;
    let u = map.iter().map(|m| m.map_or(0.0, |j| fit.theta.u[j])).collect();
    let theta = Params::new(u, fit.theta.v.iter().copied().collect());
    Ok((theta, fit.converged, present))
}

/// k-fold cross-entropy of PlusDC and of plain PL (no covariates).
///
/// Partitions are redrawn until every training set covers each object that
/// appears in the data, at most `max_retries` times.
pub fn run_kfold_cv(data: &Dataset, spec: &CvSpec, cfg: &FitConfig) -> Result<CvReport> {
    if spec.k < 2 {
        return input("k must be at least 2");
    }
    if spec.k > data.len() {
        return input(format!("k = {} exceeds the {} comparisons", spec.k, data.len()));
    }
    if spec.modes.is_empty() {
        return input("no evaluation modes given");
    }
    data.require_outcomes()?;
    let mut rng = rng::substream(spec.seed, 0);
    let mut attempts = 0;
    let folds = loop {
        attempts += 1;
        let folds = partition(data.len(), spec.k, &mut rng);
        if folds.iter().all(|f| training_covers(data, f)) {
            break folds;
        }
        if attempts >= spec.max_retries.max(1) {
            return input(format!(
                "no partition into {} folds keeps every object in each training set after {attempts} attempts; use a smaller k",
                spec.k
            ));
        }
    };
    let pl_data = data.select_covariates(&[])?;
    let jobs: Vec<(usize, CvModel)> =
        (0..spec.k).flat_map(|f| [(f, CvModel::Plusdc), (f, CvModel::Pl)]).collect();
    let per_job = jobs
        .par_iter()
        .map(|&(f, model)| {
            let source = if model == CvModel::Pl { &pl_data } else { data };
            let test = &folds[f];
            let train: Vec<usize> = folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.clone()).collect();
            let (theta, converged, present) = fit_padded(source, &train, cfg)?;
            let test_data = source.subset(test)?;
            let cold_start = test_data.comparisons().iter().filter(|c| c.edge().iter().any(|&k| !present[k])).count();
            spec.modes
                .iter()
                .map(|&mode| {
                    Ok(CvRow {
                        fold: f,
                        model,
                        mode,
                        n_test: test.len(),
                        cross_entropy: cross_entropy(&theta, &test_data, mode)?,
                        cold_start,
                        converged,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<CvRow> = per_job.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for model in [CvModel::Plusdc, CvModel::Pl] {
        for &mode in &spec.modes {
            let xs: Vec<f64> =
                rows.iter().filter(|r| r.model == model && r.mode == mode).map(|r| r.cross_entropy).collect();
            let (mean, sd) = mean_sd(&xs);
            summary.push(CvSummaryRow {
                model,
                mode,
                mean_cross_entropy: mean.expect("k >= 2 folds"),
                sd_cross_entropy: sd,
            });
        }
    }
    Ok(CvReport { spec: spec.clone(), attempts, folds, summary, rows })
}

/// Tidy CSV: one row per fold, model and mode.
pub fn write_cv_csv<W: Write>(writer: W, report: &CvReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionRow {
    /// 1-based covariate indices; empty is plain PL.
    pub subset: Vec<usize>,
    pub p: usize,
    pub loglik_norm: f64,
    pub aic_norm: Option<f64>,
    pub bic_norm: Option<f64>,
    pub converged: bool,
    pub existence: Existence,
    /// Rank by BIC among unflagged rows, starting at 1.
    pub rank: Option<usize>,
    pub flag: Option<String>,
}

/// All `2^d` subsets of `0..d`, smallest first.
pub fn all_subsets(d: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> =
        (0u64..1 << d).map(|mask| (0..d).filter(|&k| mask >> k & 1 == 1).collect()).collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// Fits one model per covariate subset (0-based indices) and ranks by BIC.
/// Subsets whose fit is nonexistent or unconverged are flagged and listed
/// after the ranked rows.
pub fn model_selection(data: &Dataset, subsets: &[Vec<usize>], cfg: &FitConfig) -> Result<Vec<SelectionRow>> {
    for s in subsets {
        if let Some(&k) = s.iter().find(|&&k| k >= data.d()) {
            return input(format!("covariate index {} out of range 1..={}", k + 1, data.d()));
        }
    }
    let fits: Vec<(Vec<usize>, FitResult)> = subsets
        .par_iter()
        .map(|s| {
            let sub = data.select_covariates(s)?;
            Ok((s.clone(), estimate::fit(&sub, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let num = data.len();
    let mut rows: Vec<SelectionRow> = fits
        .into_iter()
        .map(|(s, fit)| {
            let ic = estimate::information_criteria(fit.loglik / num as f64, data.n(), s.len(), num);
            let flag = if fit.existence.status == Existence::Nonexistent {
                Some(fit.existence.reason.clone().unwrap_or_else(|| "MLE does not exist".into()))
            } else if !fit.converged {
                Some("fit did not converge".into())
            } else {
                None
            };
            let ok = flag.is_none();
            SelectionRow {
                subset: s.iter().map(|k| k + 1).collect(),
                p: ic.p,
                loglik_norm: ic.loglik_norm,
                aic_norm: ok.then_some(ic.aic_norm),
                bic_norm: ok.then_some(ic.bic_norm),
                converged: fit.converged,
                existence: fit.existence.status,
                rank: None,
                flag,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.bic_norm, b.bic_norm) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, r) in rows.iter_mut().enumerate() {
        if r.flag.is_none() {
            r.rank = Some(i + 1);
        }
    }
    Ok(rows)
}

/// Gaussian radial basis feature `exp(-lam (t - a)^2)`.
pub fn rbf_covariate(t: f64, a: f64, lam: f64) -> Result<f64> {
    if lam.is_nan() || lam < 0.0 {
        return input(format!("RBF rate must be non-negative, got {lam}"));
    }
    Ok((-lam * (t - a).powi(2)).exp())
}

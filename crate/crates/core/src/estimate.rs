//! Joint maximum likelihood by alternating maximization: MM sweeps for `u`
//! with `v` fixed, then damped Newton for `v` with `u` fixed, until the
//! per-comparison likelihood gain falls below `epsilon`.
//!
//! Existence of the MLE is decided either exactly, by linear programs over
//! the recession cone `{theta : 1'u = 0, Z'theta <= 0}`, or heuristically,
//! by watching the iterates drift along such a direction.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::lp::{self, Constraints, LpOutcome};
use crate::model::{
    self, log_add_exp, log_likelihood_unchecked, suffix_log_sum_exp, Comparison, Dataset, Params, REDUCTION_CHUNK,
};

/// Optimal LP values above this count as a nonzero cone direction.
pub const LP_ZERO_TOL: f64 = 1e-7;
/// Drift directions whose normalized cone slack stays below this are
/// treated as recession directions.
pub const DIVERGENCE_CONE_TOL: f64 = 1e-3;
/// Minimum `||theta_end - theta_mid||_inf` for the drift test to apply.
pub const DIVERGENCE_MIN_DRIFT: f64 = 1e-3;
/// Largest dimension for the curvature test at convergence.
pub const NULL_DIRECTION_MAX_DIM: usize = 1500;
/// Curvature below this fraction of the largest eigenvalue counts as flat.
pub const FLAT_CURVATURE_RATIO: f64 = 1e-3;
/// Cone tolerance for curvature directions. These are accurate to rounding
/// at a converged point, unlike drift directions, so the LP's zero
/// tolerance applies.
pub const FLAT_CONE_TOL: f64 = LP_ZERO_TOL;
/// Curvature this far below the top is flat to rounding; such directions
/// are inaccurate, so they get the looser drift tolerance.
pub const SATURATED_CURVATURE_RATIO: f64 = 1e-12;
const NULL_DIRECTION_CANDIDATES: usize = 8;
const RIDGE_NEWTON_MAX: usize = 200;
/// Stationarity tolerance of each penalized solve, per comparison.
const RIDGE_GRAD_TOL: f64 = 1e-12;
/// Largest `n + d` for which divergence is judged from the ridge path.
pub const RIDGE_PATH_MAX_DIM: usize = 500;
/// Penalties `100^-k` for `k < RIDGE_PATH_STEPS`.
pub const RIDGE_PATH_STEPS: usize = 8;
/// The last path step must keep at least this fraction of the one before.
/// Converging paths shrink each step about a hundredfold.
pub const RIDGE_PATH_RATIO: f64 = 0.25;
pub const RIDGE_PATH_CONE_TOL: f64 = 1e-5;
/// First outer iteration at which the drift test may stop a fit early.
pub const DIVERGENCE_FIRST_CHECK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExistenceMode {
    Off,
    Divergence,
    Lp,
}

impl FromStr for ExistenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "divergence" => Ok(Self::Divergence),
            "lp" => Ok(Self::Lp),
            other => input(format!("unknown existence mode '{other}' (expected off, divergence or lp)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    /// Outer stopping tolerance on `(l_new - l_old) / N`.
    pub epsilon: f64,
    /// Stationarity guard: the outer loop also requires `||grad l||_inf / N`
    /// below this before stopping.
    pub grad_tol: f64,
    /// Convergence also needs the outer step `||theta' - theta||_inf` below
    /// this. Saturated fits of a nonexistent MLE gain nothing yet keep
    /// moving, and must not pass as converged.
    pub step_tol: f64,
    pub max_outer: usize,
    /// MM stops when `||u' - u||_inf` drops below this.
    pub inner_u_tol: f64,
    pub inner_u_max: usize,
    /// Newton stops when `||grad_v l||_inf / N` drops below this.
    pub inner_v_tol: f64,
    pub inner_v_max: usize,
    pub step_size: f64,
    pub init: Option<Params>,
    pub existence: ExistenceMode,
    /// Outer iterations of plain alternation before joint Newton steps are
    /// added, for problems of dimension at most `joint_newton_max_dim`.
    pub accelerate_after: usize,
    pub joint_newton_max_dim: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-10,
            grad_tol: 1e-9,
            step_tol: 1e-6,
            max_outer: 5000,
            inner_u_tol: 1e-8,
            inner_u_max: 100,
            inner_v_tol: 1e-10,
            inner_v_max: 50,
            step_size: 1.0,
            init: None,
            existence: ExistenceMode::Divergence,
            accelerate_after: 50,
            joint_newton_max_dim: 500,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("grad_tol", self.grad_tol),
            ("step_tol", self.step_tol),
            ("inner_u_tol", self.inner_u_tol),
            ("inner_v_tol", self.inner_v_tol),
            ("step_size", self.step_size),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return input(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_outer == 0 || self.inner_u_max == 0 || self.inner_v_max == 0 {
            return input("iteration caps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Existence {
    Exists,
    Nonexistent,
    Undetermined,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExistenceReport {
    pub status: Existence,
    /// Nonzero `theta_0 = (u_0, v_0)` with `1'u_0 = 0` and `Z'theta_0 <= 0`.
    pub witness: Option<Vec<f64>>,
    pub reason: Option<String>,
}

impl ExistenceReport {
    pub fn exists(&self) -> bool {
        self.status == Existence::Exists
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta: Params,
    /// Normalized log-likelihood at the start and after every outer iteration.
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub outer_iters: usize,
    pub converged: bool,
    pub existence: ExistenceReport,
    /// `||grad l||_inf / N` at exit.
    pub gradient_norm: f64,
    /// MM steps that lowered the likelihood beyond rounding.
    pub mm_monotonicity_violations: usize,
    pub mm_steps: usize,
    pub newton_steps: usize,
    /// Accepted joint Newton steps.
    pub joint_steps: usize,
}

fn check_setup(theta: &Params, data: &Dataset) -> Result<()> {
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

fn check_degrees(data: &Dataset) -> Result<Vec<usize>> {
    let deg = data.graph().degrees();
    if let Some(k) = deg.iter().position(|&x| x == 0) {
        return Err(Error::Domain(format!("object {} appears in no comparison", k + 1)));
    }
    Ok(deg)
}

/// Per-object `log sum_{i: k in e_i} sum_{j <= r_i(k)} exp(X'v) / sum_{t >= j} exp(s_it)`.
fn mm_log_denominators(theta: &Params, comps: &[Comparison]) -> Vec<f64> {
    let n = theta.n();
    let chunk = |cs: &[Comparison]| {
        let mut acc = vec![f64::NEG_INFINITY; n];
        for c in cs {
            let order = c.ranking_positions().expect("outcomes checked");
            let xv: Vec<f64> = order.iter().map(|&j| (c.covariate_row(j) * &theta.v)[0]).collect();
            let s: Vec<f64> = order.iter().zip(&xv).map(|(&j, x)| theta.u[c.edge()[j]] + x).collect();
            let lse = suffix_log_sum_exp(&s);
            let mut prefix = f64::NEG_INFINITY;
            for (t, &j) in order.iter().enumerate() {
                prefix = log_add_exp(prefix, -lse[t]);
                let k = c.edge()[j];
                acc[k] = log_add_exp(acc[k], xv[t] + prefix);
            }
        }
        acc
    };
    let merge = |mut a: Vec<f64>, b: Vec<f64>| {
        for (x, y) in a.iter_mut().zip(b) {
            *x = log_add_exp(*x, y);
        }
        a
    };
    if comps.len() <= REDUCTION_CHUNK {
        return chunk(comps);
    }
    let parts: Vec<Vec<f64>> = comps.par_chunks(REDUCTION_CHUNK).map(chunk).collect();
    parts.into_iter().fold(vec![f64::NEG_INFINITY; n], merge)
}

fn mm_raw(theta: &Params, comps: &[Comparison], deg: &[usize]) -> DVector<f64> {
    let denom = mm_log_denominators(theta, comps);
    DVector::from_fn(theta.n(), |k, _| (deg[k] as f64).ln() - denom[k])
}

fn centered(mut u: DVector<f64>) -> DVector<f64> {
    let mean = u.mean();
    u.add_scalar_mut(-mean);
    u
}

/// One MM update of `u` before centering.
pub fn mm_update_u_raw(theta: &Params, data: &Dataset) -> Result<DVector<f64>> {
    check_setup(theta, data)?;
    let deg = check_degrees(data)?;
    Ok(mm_raw(theta, data.comparisons(), &deg))
}

/// One MM update of `u`, centered to sum zero.
pub fn mm_update_u(theta: &Params, data: &Dataset) -> Result<DVector<f64>> {
    mm_update_u_raw(theta, data).map(centered)
}

/// Minorizer `Q(u | u_ref, v)` of the log-likelihood in `u`.
pub fn minorizer_q(u: &DVector<f64>, u_ref: &DVector<f64>, v: &DVector<f64>, data: &Dataset) -> Result<f64> {
    let theta = Params { u: u.clone(), v: v.clone() };
    let theta_ref = Params { u: u_ref.clone(), v: v.clone() };
    check_setup(&theta, data)?;
    check_setup(&theta_ref, data)?;
    let mut total = 0.0;
    for c in data.comparisons() {
        let order = c.ranking_positions().expect("outcomes checked");
        let s: Vec<f64> = order.iter().map(|&j| model::score(&theta, c, j)).collect::<Result<_>>()?;
        let s_ref: Vec<f64> = order.iter().map(|&j| model::score(&theta_ref, c, j)).collect::<Result<_>>()?;
        let lse = suffix_log_sum_exp(&s);
        let lse_ref = suffix_log_sum_exp(&s_ref);
        for j in 0..s.len() {
            total += s[j] - (lse[j] - lse_ref[j]).exp() + 1.0 - lse_ref[j];
        }
    }
    Ok(total)
}

/// Gradient and Hessian of `l` in `v` from the stagewise softmax weights
/// `b_ij`: `sum (X_j - mean_b X)` and `-sum [X' diag(b) X - (X'b)(X'b)']`.
pub fn v_gradient_hessian(theta: &Params, data: &Dataset) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_setup(theta, data)?;
    Ok(v_grad_hess(theta, data.comparisons()))
}

fn v_grad_hess(theta: &Params, comps: &[Comparison]) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.d();
    let chunk = |cs: &[Comparison]| {
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for c in cs {
            let order = c.ranking_positions().expect("outcomes checked");
            let x = c.covariates().select_rows(order.iter());
            let s: Vec<f64> = order
                .iter()
                .enumerate()
                .map(|(t, &j)| theta.u[c.edge()[j]] + (x.row(t) * &theta.v)[0])
                .collect();
            let lse = suffix_log_sum_exp(&s);
            let m = s.len();
            for j in 0..m {
                mean.fill(0.0);
                second.fill(0.0);
                for t in j..m {
                    let b = (s[t] - lse[j]).exp();
                    let row = x.row(t).transpose();
                    mean.axpy(b, &row, 1.0);
                    second.ger(b, &row, &row, 1.0);
                }
                g += x.row(j).transpose() - &mean;
                h -= &second;
                h.ger(1.0, &mean, &mean, 1.0);
            }
        }
        (g, h)
    };
    let add = |(g1, h1): (DVector<f64>, DMatrix<f64>), (g2, h2): (DVector<f64>, DMatrix<f64>)| (g1 + g2, h1 + h2);
    if comps.len() <= REDUCTION_CHUNK {
        return chunk(comps);
    }
    let parts: Vec<_> = comps.par_chunks(REDUCTION_CHUNK).map(chunk).collect();
    parts.into_iter().fold((DVector::zeros(d), DMatrix::zeros(d, d)), add)
}

/// Solves `(-H) delta = g`, adding a ridge `1e-8 * tr(-H) / d` if `-H` is
/// not numerically positive definite.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Result<DVector<f64>> {
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        let delta = ch.solve(g);
        if delta.iter().all(|x| x.is_finite()) {
            return Ok(delta);
        }
    }
    let d = g.len();
    let ridge = 1e-8 * neg.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let reg = neg + DMatrix::identity(d, d) * ridge;
    reg.cholesky().map(|ch| ch.solve(g)).ok_or_else(|| {
        Error::Numeric(format!(
            "v-Hessian is not negative definite even with ridge {ridge:e}; trace {:e}",
            h.trace()
        ))
    })
}

/// One Newton step `v' = v - nu * H_v^{-1} grad_v`.
pub fn newton_update_v(theta: &Params, data: &Dataset, nu: f64) -> Result<DVector<f64>> {
    check_setup(theta, data)?;
    if theta.d() == 0 {
        return Ok(DVector::zeros(0));
    }
    let (g, h) = v_grad_hess(theta, data.comparisons());
    Ok(&theta.v + newton_direction(&g, &h)? * nu)
}

struct Fitter<'a> {
    cfg: &'a FitConfig,
    comps: &'a [Comparison],
    deg: Vec<usize>,
    theta: Params,
    ll: f64,
    mm_steps: usize,
    mm_violations: usize,
    newton_steps: usize,
    joint_steps: usize,
}

impl Fitter<'_> {
    fn u_step(&mut self) {
        for _ in 0..self.cfg.inner_u_max {
            let u_new = centered(mm_raw(&self.theta, self.comps, &self.deg));
            let change = (&u_new - &self.theta.u).amax();
            let prev = std::mem::replace(&mut self.theta.u, u_new);
            let ll = log_likelihood_unchecked(&self.theta, self.comps);
            self.mm_steps += 1;
            if ll < self.ll - 1e-12 * self.ll.abs().max(1.0) {
                self.mm_violations += 1;
                log::warn!("MM step lowered the likelihood from {} to {}", self.ll, ll);
            }
            if !ll.is_finite() {
                self.theta.u = prev;
                break;
            }
            self.ll = ll;
            if change <= self.cfg.inner_u_tol {
                break;
            }
        }
    }

    /// One Newton step on the full parameter restricted to `1'u = 0`.
    fn joint_newton(&mut self) -> Result<()> {
        let n = self.theta.n();
        let g = model::gradient_unchecked(&self.theta, self.comps);
        let lifted = lifted_information(&self.theta, self.comps);
        // A singular system means the model is not identifiable; plain
        // alternation carries on.
        let Ok(delta) = newton_direction(&g, &-lifted) else { return Ok(()) };
        let d = self.theta.d();
        let du = delta.rows(0, n).into_owned();
        let dv = delta.rows(n, d).into_owned();
        let change = max_score_change(self.comps, &du, &dv);
        let delta = if change > MAX_SCORE_STEP { delta * (MAX_SCORE_STEP / change) } else { delta };
        let here = self.theta.to_vector();
        let mut nu = 1.0;
        for _ in 0..40 {
            let mut trial = Params::from_vector(&(&here + &delta * nu), n);
            trial.center();
            let ll = log_likelihood_unchecked(&trial, self.comps);
            if ll.is_finite() && ll >= self.ll {
                self.theta = trial;
                self.ll = ll;
                self.joint_steps += 1;
                break;
            }
            nu *= 0.5;
        }
        Ok(())
    }

    fn v_step(&mut self) -> Result<()> {
        if self.theta.d() == 0 {
            return Ok(());
        }
        let scale = self.comps.len() as f64;
        let zero = DVector::zeros(self.theta.n());
        let start = self.theta.v.clone();
        for _ in 0..self.cfg.inner_v_max {
            let (g, h) = v_grad_hess(&self.theta, self.comps);
            if g.amax() / scale <= self.cfg.inner_v_tol {
                break;
            }
            // The score budget is shared by the whole block update, so each
            // outer iteration moves fitted scores by at most MAX_SCORE_STEP.
            let used = max_score_change(self.comps, &zero, &(&self.theta.v - &start));
            let budget = MAX_SCORE_STEP - used;
            if budget <= 1e-3 * MAX_SCORE_STEP {
                break;
            }
            let delta = newton_direction(&g, &h)?;
            let change = max_score_change(self.comps, &zero, &delta);
            let delta = if change > budget { delta * (budget / change) } else { delta };
            // Full steps are taken whenever they do not lower the likelihood;
            // otherwise the step is halved.
            let mut nu = self.cfg.step_size;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = Params { u: self.theta.u.clone(), v: &self.theta.v + &delta * nu };
                let ll = log_likelihood_unchecked(&trial, self.comps);
                if ll.is_finite() && ll >= self.ll {
                    self.theta = trial;
                    self.ll = ll;
                    accepted = true;
                    break;
                }
                nu *= 0.5;
            }
            self.newton_steps += 1;
            if !accepted {
                break;
            }
        }
        Ok(())
    }
}

/// Largest change of any fitted log score a single v block update or joint
/// Newton step may cause.
/// Without it one step can jump straight into the flat region of a
/// nonexistent MLE, where the fit looks converged before any drift shows.
pub const MAX_SCORE_STEP: f64 = 2.0;

/// Largest change of any fitted log score under the step `(du, dv)`.
fn max_score_change(comps: &[Comparison], du: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for c in comps {
        let dx = c.covariates() * dv;
        for (j, &k) in c.edge().iter().enumerate() {
            worst = worst.max((du[k] + dx[j]).abs());
        }
    }
    worst
}

/// Fits the model by alternating maximization.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    data.require_outcomes()?;
    if data.is_empty() {
        return input("no comparisons to fit");
    }
    let deg = check_degrees(data)?;
    if !data.graph().is_connected() {
        log::warn!("comparison graph is disconnected; the model is not identifiable");
    }
    let violations = data.covariate_bound_violations(model::DEFAULT_COVARIATE_BOUND);
    if violations > 0 {
        log::warn!(
            "{violations} comparisons have covariates with L1 norm above {}",
            model::DEFAULT_COVARIATE_BOUND
        );
    }
    let mut theta = cfg.init.clone().unwrap_or_else(|| Params::zeros(data.n(), data.d()));
    check_setup(&theta, data)?;
    theta.center();

    // Decided before the loop when an exact or path-based check applies;
    // otherwise divergence is judged from the iterates.
    let prior = match cfg.existence {
        ExistenceMode::Off => None,
        ExistenceMode::Lp => Some(check_mle_existence(data)),
        ExistenceMode::Divergence => path_existence(data),
    };

    let comps = data.comparisons();
    let num = comps.len() as f64;
    let ll = log_likelihood_unchecked(&theta, comps);
    let mut f = Fitter { cfg, comps, deg, theta, ll, mm_steps: 0, mm_violations: 0, newton_steps: 0, joint_steps: 0 };
    let mut trace = vec![ll / num];
    let mut snapshots = vec![(0usize, f.theta.to_vector())];
    let mut converged = false;
    let mut outer_iters = 0;
    let known_nonexistent = prior.as_ref().is_some_and(|r| r.status == Existence::Nonexistent);
    let watch_drift = cfg.existence == ExistenceMode::Divergence && prior.is_none();
    let mut detected = None;
    for outer in 1..=cfg.max_outer {
        let before = f.ll;
        let start = f.theta.to_vector();
        f.u_step();
        f.v_step()?;
        if outer > cfg.accelerate_after && data.n() + data.d() <= cfg.joint_newton_max_dim {
            f.joint_newton()?;
        }
        trace.push(f.ll / num);
        outer_iters = outer;
        if (f.ll - before) / num <= cfg.epsilon
            && (f.theta.to_vector() - start).amax() <= cfg.step_tol
            && model::gradient_unchecked(&f.theta, comps).amax() / num <= cfg.grad_tol
        {
            converged = true;
            break;
        }
        if outer.is_power_of_two() {
            snapshots.push((outer, f.theta.to_vector()));
            if known_nonexistent && outer >= DIVERGENCE_FIRST_CHECK {
                break;
            }
            // Check the drift since the previous snapshot so divergent fits
            // stop long before the iteration cap.
            if watch_drift && outer >= DIVERGENCE_FIRST_CHECK {
                let earlier = Params::from_vector(&snapshots[snapshots.len() - 2].1, data.n());
                let report = divergence_report(data, &f.theta, &earlier, false, false);
                if report.status == Existence::Nonexistent {
                    detected = Some(report);
                    break;
                }
            }
        }
    }
    let theta = f.theta;
    let gradient_norm = model::gradient_unchecked(&theta, comps).amax() / num;

    let existence = match cfg.existence {
        ExistenceMode::Off => ExistenceReport {
            status: Existence::Undetermined,
            witness: None,
            reason: Some("existence check disabled".into()),
        },
        _ if prior.is_some() => prior.expect("checked"),
        ExistenceMode::Lp => unreachable!("the cone program always reports"),
        ExistenceMode::Divergence => detected.unwrap_or_else(|| {
            let earlier = snapshots
                .iter()
                .rev()
                .find(|(t, _)| 2 * t <= outer_iters)
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| snapshots[0].1.clone());
            divergence_report(data, &theta, &Params::from_vector(&earlier, data.n()), converged, true)
        }),
    };
    Ok(FitResult {
        theta,
        loglik_trace: trace,
        loglik: f.ll,
        outer_iters,
        converged,
        existence,
        gradient_norm,
        mm_monotonicity_violations: f.mm_violations,
        mm_steps: f.mm_steps,
        newton_steps: f.newton_steps,
        joint_steps: f.joint_steps,
    })
}

/// `||u||_inf` beyond which the iterate is declared divergent.
pub fn divergence_threshold(n: usize) -> f64 {
    30.0 + 10.0 * (n.max(1) as f64).ln()
}

/// `max(||u||_inf, max_{e,j} |X_{e,j}'v|)`: the largest utility or
/// covariate contribution to any fitted log score.
pub fn max_fitted_magnitude(data: &Dataset, theta: &Params) -> f64 {
    let mut worst = theta.u.amax();
    if theta.d() > 0 {
        for c in data.comparisons() {
            worst = worst.max((c.covariates() * &theta.v).amax());
        }
    }
    worst
}

/// Largest `Z'theta / ||Z||` over adjacent-rank pairs: the normalized amount
/// by which some observed loser outscores the winner ranked just above it.
pub fn max_cone_slack(data: &Dataset, dir: &Params) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for c in data.comparisons() {
        let Some(order) = c.ranking_positions() else { continue };
        for t in 0..order.len().saturating_sub(1) {
            let (w, l) = (order[t], order[t + 1]);
            let mut z = dir.u[c.edge()[l]] - dir.u[c.edge()[w]];
            let mut norm2 = 2.0;
            for k in 0..dir.d() {
                let dx = c.covariates()[(l, k)] - c.covariates()[(w, k)];
                z += dx * dir.v[k];
                norm2 += dx * dx;
            }
            worst = worst.max(z / norm2.sqrt());
        }
    }
    worst
}

/// `-H` with the constant-utility direction, its kernel, lifted to the mean
/// curvature so the matrix is definite whenever the model is identifiable.
fn lifted_information(theta: &Params, comps: &[Comparison]) -> DMatrix<f64> {
    let n = theta.n();
    let mut m = -model::hessian_unchecked(theta, comps);
    let scale = (m.trace() / m.nrows() as f64).max(f64::MIN_POSITIVE);
    let w = scale / n as f64;
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] += w;
        }
    }
    m
}

/// Near-flat curvature directions at a converged point that no observed
/// outcome penalizes. Saturated fits of a nonexistent MLE stop because the
/// likelihood is flat along the recession direction, not because it peaked.
fn flat_recession_direction(data: &Dataset, theta: &Params) -> Option<Params> {
    let eig = lifted_information(theta, data.comparisons()).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    for &i in order.iter().take(NULL_DIRECTION_CANDIDATES) {
        let ratio = eig.eigenvalues[i] / top;
        if ratio > FLAT_CURVATURE_RATIO {
            break;
        }
        let tol = if ratio <= SATURATED_CURVATURE_RATIO { DIVERGENCE_CONE_TOL } else { FLAT_CONE_TOL };
        let mut dir = Params::from_vector(&eig.eigenvectors.column(i).into_owned(), data.n());
        dir.center();
        let norm = dir.to_vector().norm();
        if norm == 0.0 {
            continue;
        }
        for sign in [1.0, -1.0] {
            let cand = Params::from_vector(&(dir.to_vector() * (sign / norm)), data.n());
            if max_cone_slack(data, &cand) <= tol {
                return Some(cand);
            }
        }
    }
    None
}

/// `at_exit` enables the magnitude rule, which in-loop checks skip: an
/// existing MLE can sit at large parameters when covariates nearly cancel
/// object effects, and acceleration may still be travelling toward it.
fn divergence_report(data: &Dataset, last: &Params, earlier: &Params, converged: bool, at_exit: bool) -> ExistenceReport {
    let mut drift = Params { u: &last.u - &earlier.u, v: &last.v - &earlier.v };
    drift.center();
    let drift_size = drift.to_vector().amax();
    let big = at_exit && max_fitted_magnitude(data, last) > divergence_threshold(data.n());
    let direction = |p: &Params| {
        let v = p.to_vector();
        let norm = v.norm();
        (norm > 0.0).then(|| Params::from_vector(&(v / norm), data.n()))
    };
    if drift_size >= DIVERGENCE_MIN_DRIFT {
        if let Some(dir) = direction(&drift) {
            if max_cone_slack(data, &dir) <= DIVERGENCE_CONE_TOL {
                return ExistenceReport {
                    status: Existence::Nonexistent,
                    witness: Some(dir.to_vector().iter().copied().collect()),
                    reason: Some("iterates drift along a direction no observed outcome penalizes".into()),
                };
            }
        }
    }
    if converged && data.n() + data.d() <= NULL_DIRECTION_MAX_DIM {
        if let Some(dir) = flat_recession_direction(data, last) {
            return ExistenceReport {
                status: Existence::Nonexistent,
                witness: Some(dir.to_vector().iter().copied().collect()),
                reason: Some("likelihood is flat along a direction no observed outcome penalizes".into()),
            };
        }
        return ExistenceReport { status: Existence::Exists, witness: None, reason: None };
    }
    if big {
        let mut t = last.clone();
        t.center();
        return ExistenceReport {
            status: Existence::Nonexistent,
            witness: direction(&t).map(|d| d.to_vector().iter().copied().collect()),
            reason: Some(format!("fitted log scores exceed {:.3} in magnitude", divergence_threshold(data.n()))),
        };
    }
    if converged {
        ExistenceReport { status: Existence::Exists, witness: None, reason: None }
    } else {
        ExistenceReport {
            status: Existence::Undetermined,
            witness: None,
            reason: Some("fit did not converge and no divergence was detected".into()),
        }
    }
}

/// Maximizers of `l(theta) - lambda N ||theta||^2 / 2` on `1'u = 0` for
/// each `lambda`, solved in order by damped Newton from the previous one.
/// The penalized problem is strongly concave, so every maximizer exists.
pub fn ridge_path(data: &Dataset, lambdas: &[f64]) -> Result<Vec<Params>> {
    data.require_outcomes()?;
    let comps = data.comparisons();
    let (n, d) = (data.n(), data.d());
    let num = comps.len() as f64;
    let objective = |t: &Params, lam: f64| {
        log_likelihood_unchecked(t, comps) - 0.5 * lam * num * t.to_vector().norm_squared()
    };
    let mut theta = Params::zeros(n, d);
    let mut out = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let mut f = objective(&theta, lam);
        for _ in 0..RIDGE_NEWTON_MAX {
            let x = theta.to_vector();
            let g = model::gradient_unchecked(&theta, comps) - &x * (lam * num);
            if g.amax() <= RIDGE_GRAD_TOL * num {
                break;
            }
            let mut m = lifted_information(&theta, comps);
            for i in 0..n + d {
                m[(i, i)] += lam * num;
            }
            let delta = m
                .cholesky()
                .map(|ch| ch.solve(&g))
                .ok_or_else(|| Error::Numeric(format!("penalized information not definite at lambda {lam:e}")))?;
            let mut nu = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let mut trial = Params::from_vector(&(&x + &delta * nu), n);
                trial.center();
                let ft = objective(&trial, lam);
                if ft.is_finite() && ft >= f - 1e-15 * f.abs() {
                    moved = ft > f || nu == 1.0;
                    theta = trial;
                    f = ft;
                    break;
                }
                nu *= 0.5;
            }
            if !moved {
                break;
            }
        }
        out.push(theta.clone());
    }
    Ok(out)
}

/// Existence from the ridge path: the penalized maximizers converge as
/// `lambda -> 0` exactly when the MLE exists, and otherwise advance by a
/// constant step along a recession direction per decade pair of `lambda`.
/// `None` when the problem is too large for dense Newton solves.
pub fn path_existence(data: &Dataset) -> Option<ExistenceReport> {
    if data.n() + data.d() > RIDGE_PATH_MAX_DIM {
        return None;
    }
    // Flat directions leave the penalized path bounded; rank finds them.
    let dm = crate::design::assemble(data).ok()?;
    let ident = crate::design::identifiability_check_with(&dm, crate::design::RankMethod::LaplacianProjection);
    if !ident.identifiable {
        return Some(ExistenceReport {
            status: Existence::Nonexistent,
            witness: ident.witness,
            reason: Some("model is not identifiable, so the maximizer is not unique".into()),
        });
    }
    let lambdas: Vec<f64> = (0..RIDGE_PATH_STEPS).map(|k| 100f64.powi(-(k as i32))).collect();
    let path = ridge_path(data, &lambdas).ok()?;
    let k = path.len() - 1;
    let last = path[k].to_vector() - path[k - 1].to_vector();
    let prev = path[k - 1].to_vector() - path[k - 2].to_vector();
    let (step, prev_step) = (last.norm(), prev.norm());
    if step > 0.0 && step >= RIDGE_PATH_RATIO * prev_step {
        let dir = Params::from_vector(&(&last / step), data.n());
        if max_cone_slack(data, &dir) <= RIDGE_PATH_CONE_TOL {
            return Some(ExistenceReport {
                status: Existence::Nonexistent,
                witness: Some(dir.to_vector().iter().copied().collect()),
                reason: Some("penalized maximizers run off along a direction no observed outcome penalizes".into()),
            });
        }
    }
    Some(ExistenceReport { status: Existence::Exists, witness: None, reason: None })
}

/// Decides whether the MLE exists by maximizing `+-theta_k` over the cone
/// `{1'u = 0, Z'theta <= 0}` intersected with the unit box.
pub fn check_mle_existence(data: &Dataset) -> ExistenceReport {
    match lp_existence(data) {
        Ok(r) => r,
        Err(e) => ExistenceReport { status: Existence::Undetermined, witness: None, reason: Some(e.to_string()) },
    }
}

fn lp_existence(data: &Dataset) -> Result<ExistenceReport> {
    data.require_outcomes()?;
    let (n, d) = (data.n(), data.d());
    let p = n + d;
    // theta = x[0..p] - x[p..2p], every x bounded by 1.
    let mut cons = Constraints::default();
    let signed = |coef: &[(usize, f64)]| -> Vec<(usize, f64)> {
        coef.iter().flat_map(|&(k, a)| [(k, a), (p + k, -a)]).collect()
    };
    for c in data.comparisons() {
        let order = c.ranking_positions().expect("outcomes checked");
        for t in 0..order.len() - 1 {
            let (w, l) = (order[t], order[t + 1]);
            let mut coef = vec![(c.edge()[l], 1.0), (c.edge()[w], -1.0)];
            for k in 0..d {
                let dx = c.covariates()[(l, k)] - c.covariates()[(w, k)];
                if dx != 0.0 {
                    coef.push((n + k, dx));
                }
            }
            cons.push(signed(&coef), 0.0);
        }
    }
    let sum_u: Vec<(usize, f64)> = (0..n).map(|k| (k, 1.0)).collect();
    cons.push(signed(&sum_u), 0.0);
    let neg: Vec<(usize, f64)> = (0..n).map(|k| (k, -1.0)).collect();
    cons.push(signed(&neg), 0.0);
    for k in 0..2 * p {
        cons.push(vec![(k, 1.0)], 1.0);
    }
    let objectives: Vec<Vec<f64>> = (0..p)
        .flat_map(|k| {
            [1.0, -1.0].map(|sign| {
                let mut c = vec![0.0; 2 * p];
                c[k] = sign;
                c[p + k] = -sign;
                c
            })
        })
        .collect();
    let nonzero = |o: &LpOutcome| match o {
        LpOutcome::Optimal { value, .. } => *value > LP_ZERO_TOL,
        LpOutcome::Unbounded => true,
    };
    let outcomes = lp::maximize_many(&objectives, 2 * p, &cons, nonzero)?;
    match outcomes.last() {
        Some(LpOutcome::Optimal { x, value }) if *value > LP_ZERO_TOL => {
            let mut theta = Params::from_vector(&DVector::from_fn(p, |k, _| x[k] - x[p + k]), n);
            theta.center();
            Ok(ExistenceReport {
                status: Existence::Nonexistent,
                witness: Some(theta.to_vector().iter().copied().collect()),
                reason: None,
            })
        }
        Some(LpOutcome::Unbounded) => Err(Error::Numeric("bounded cone program reported unbounded".into())),
        _ => Ok(ExistenceReport { status: Existence::Exists, witness: None, reason: None }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InformationCriteria {
    pub loglik_norm: f64,
    pub aic_norm: f64,
    pub bic_norm: f64,
    /// Free parameters `(n - 1) + d`.
    pub p: usize,
}

/// Normalized AIC and BIC from a normalized log-likelihood.
pub fn information_criteria(loglik_norm: f64, n: usize, d: usize, num_comparisons: usize) -> InformationCriteria {
    let p = n.saturating_sub(1) + d;
    let big_n = num_comparisons as f64;
    InformationCriteria {
        loglik_norm,
        aic_norm: -2.0 * loglik_norm + 2.0 * p as f64 / big_n,
        bic_norm: -2.0 * loglik_norm + p as f64 * big_n.ln() / big_n,
        p,
    }
}

pub fn aic_bic(fit: &FitResult, data: &Dataset) -> Result<InformationCriteria> {
    if !fit.converged {
        return Err(Error::Precondition("information criteria need a converged fit".into()));
    }
    Ok(information_criteria(fit.loglik / data.len() as f64, data.n(), data.d(), data.len()))
}

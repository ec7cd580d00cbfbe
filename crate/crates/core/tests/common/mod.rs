//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's likelihood code: probabilities come from enumeration and
//! the naive quadratic-time formula.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use plusdc::estimate::{check_mle_existence, Existence};
use plusdc::model::sample_outcome;
use plusdc::rng::SimRng;
use plusdc::{Comparison, Dataset, Params};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_matrix(rng: &mut SimRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Centered utilities uniform on `[-half, half]`.
pub fn random_params(rng: &mut SimRng, n: usize, d: usize, half: f64) -> Params {
    let mut p = Params::new(
        (0..n).map(|_| rng.random_range(-half..=half)).collect(),
        (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    );
    p.center();
    p
}

/// Random edges of size `2..=max_m` with Gaussian covariates and outcomes
/// drawn from the model at `theta`. Every object appears at least once.
pub fn random_dataset(rng: &mut SimRng, theta: &Params, num: usize, max_m: usize) -> Dataset {
    let (n, d) = (theta.n(), theta.d());
    let mut comps = Vec::with_capacity(num);
    for i in 0..num {
        let m = rng.random_range(2..=max_m.min(n));
        let mut objects: Vec<usize> = sample(rng, n, m).into_vec();
        // Cycle through objects first so degrees are positive.
        if i < n && !objects.contains(&i) {
            objects[0] = i;
        }
        let x = normal_matrix(rng, m, d);
        let mut c = Comparison::new(objects, x, None).unwrap();
        let pi = sample_outcome(theta, &c, rng).unwrap();
        c.set_ranking(&pi).unwrap();
        comps.push(c);
    }
    Dataset::new(n, d, comps).unwrap()
}

/// Draws datasets until the cone program certifies existence.
pub fn well_posed_dataset(rng: &mut SimRng, theta: &Params, num: usize, max_m: usize) -> Dataset {
    loop {
        let data = random_dataset(rng, theta, num, max_m);
        if check_mle_existence(&data).status == Existence::Exists {
            return data;
        }
    }
}

pub fn naive_score(theta: &Params, c: &Comparison, j: usize) -> f64 {
    let x = c.covariates();
    theta.u[c.edge()[j]] + (0..c.d()).map(|k| x[(j, k)] * theta.v[k]).sum::<f64>()
}

/// Direct product of sequential choice probabilities, no log-space tricks
/// beyond a max shift.
pub fn naive_ranking_prob(scores: &[f64], order: &[usize]) -> f64 {
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
    let mut p = 1.0;
    for j in 0..order.len() {
        let denom: f64 = order[j..].iter().map(|&t| w[t]).sum();
        p *= w[order[j]] / denom;
    }
    p
}

pub fn naive_loglik(theta: &Params, data: &Dataset) -> f64 {
    data.comparisons()
        .iter()
        .map(|c| {
            let s: Vec<f64> = (0..c.size()).map(|j| naive_score(theta, c, j)).collect();
            let order = c.ranking_positions().unwrap();
            let mut l = 0.0;
            for j in 0..order.len() {
                let mx = order[j..].iter().map(|&t| s[t]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + order[j..].iter().map(|&t| (s[t] - mx).exp()).sum::<f64>().ln();
                l += s[order[j]] - lse;
            }
            l
        })
        .sum()
}

/// Quadratic-time gradient straight from the stagewise softmax definition.
pub fn naive_gradient(theta: &Params, data: &Dataset) -> DVector<f64> {
    let (n, d) = (theta.n(), theta.d());
    let mut g = DVector::zeros(n + d);
    for c in data.comparisons() {
        let s: Vec<f64> = (0..c.size()).map(|j| naive_score(theta, c, j)).collect();
        let order = c.ranking_positions().unwrap();
        let x = c.covariates();
        for j in 0..order.len() {
            let tail = &order[j..];
            let mx = tail.iter().map(|&t| s[t]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = tail.iter().map(|&t| (s[t] - mx).exp()).sum();
            let chosen = order[j];
            g[c.edge()[chosen]] += 1.0;
            for k in 0..d {
                g[n + k] += x[(chosen, k)];
            }
            for &t in tail {
                let p = (s[t] - mx).exp() / z;
                g[c.edge()[t]] -= p;
                for k in 0..d {
                    g[n + k] -= p * x[(t, k)];
                }
            }
        }
    }
    g
}

fn project(g: &mut DVector<f64>, n: usize) {
    let mean = g.rows(0, n).mean();
    g.rows_mut(0, n).add_scalar_mut(-mean);
}

/// Projected gradient ascent on `{1'u = 0}` with Barzilai-Borwein steps and
/// a nonmonotone Armijo safeguard over the last ten values. Stops when the
/// projected gradient is below `tol * N`.
pub fn gradient_ascent_oracle(data: &Dataset, tol: f64, max_iter: usize) -> Params {
    let (n, d) = (data.n(), data.d());
    let num = data.len() as f64;
    let mut x = DVector::zeros(n + d);
    let f = |x: &DVector<f64>| naive_loglik(&Params::from_vector(x, n), data);
    let grad = |x: &DVector<f64>| {
        let mut g = naive_gradient(&Params::from_vector(x, n), data);
        project(&mut g, n);
        g
    };
    let mut g = grad(&x);
    let mut history = vec![f(&x)];
    let mut step = 1.0 / num;
    for _ in 0..max_iter {
        if g.amax() <= tol * num {
            break;
        }
        let reference = history.iter().rev().take(10).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = step;
        let (x_new, f_new) = loop {
            let cand = &x + &g * t;
            let fc = f(&cand);
            // The slack absorbs rounding once gains fall below double precision.
            let slack = 1e-13 * reference.abs();
            if fc >= reference + 1e-4 * t * g.norm_squared() - slack || t < 1e-20 {
                break (cand, fc);
            }
            t *= 0.5;
        };
        let g_new = grad(&x_new);
        let s = &x_new - &x;
        let y = &g - &g_new;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { 1.0 / num };
        x = x_new;
        history.push(f_new);
        g = g_new;
    }
    Params::from_vector(&x, n)
}

/// Every permutation of `0..m`.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Upper-tail probability of a chi-square variable.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(dof as f64).unwrap().sf(x)
}

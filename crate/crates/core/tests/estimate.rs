mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use plusdc::estimate::{self, Existence, ExistenceMode, FitConfig};
use plusdc::model::{self, Comparison, Dataset, Params};
use plusdc::rng;
use proptest::prelude::*;
use rand::Rng;

fn pairwise(n: usize, d: usize, games: &[(usize, usize, Vec<f64>, Vec<f64>)]) -> Dataset {
    let comps = games
        .iter()
        .map(|(w, l, xw, xl)| {
            let x = DMatrix::from_fn(2, d, |r, c| if r == 0 { xw[c] } else { xl[c] });
            Comparison::new(vec![*w, *l], x, Some(vec![*w, *l])).unwrap()
        })
        .collect();
    Dataset::new(n, d, comps).unwrap()
}

fn lp_config() -> FitConfig {
    FitConfig { existence: ExistenceMode::Lp, ..FitConfig::default() }
}

/// Checks that `theta` ranks every observed winner at least as high as each
/// object it beat, and is centered and nonzero.
fn is_recession_direction(data: &Dataset, w: &[f64]) -> bool {
    let theta = Params::from_vector(&DVector::from_column_slice(w), data.n());
    let scale = w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if scale == 0.0 || theta.u.sum().abs() > 1e-9 * scale {
        return false;
    }
    data.comparisons().iter().all(|c| {
        let order = c.ranking_positions().unwrap();
        let s: Vec<f64> = order.iter().map(|&j| naive_score(&theta, c, j)).collect();
        (0..s.len()).all(|j| (j + 1..s.len()).all(|t| s[t] - s[j] <= 1e-9 * scale))
    })
}

#[test]
fn bradley_terry_closed_form() {
    let none = Vec::new;
    let data = pairwise(2, 0, &[(0, 1, none(), none()), (0, 1, none(), none()), (1, 0, none(), none())]);
    let fit = estimate::fit(&data, &lp_config()).unwrap();
    assert!(fit.converged);
    let half_log2 = 2f64.ln() / 2.0;
    assert!((fit.theta.u[0] - half_log2).abs() < 1e-8);
    assert!((fit.theta.u[1] + half_log2).abs() < 1e-8);
    assert!((fit.theta.u[0] - 0.34657).abs() < 1e-5);
}

#[test]
fn three_cycle_exists_and_single_win_does_not() {
    let none = Vec::new;
    let cycle = pairwise(3, 0, &[(0, 1, none(), none()), (1, 2, none(), none()), (2, 0, none(), none())]);
    assert_eq!(estimate::check_mle_existence(&cycle).status, Existence::Exists);
    let fit = estimate::fit(&cycle, &FitConfig::default()).unwrap();
    assert!(fit.converged && fit.theta.u.amax() < 1e-8);
    let single = pairwise(2, 0, &[(0, 1, none(), none())]);
    let report = estimate::check_mle_existence(&single);
    assert_eq!(report.status, Existence::Nonexistent);
    let w = report.witness.unwrap();
    assert!(w[0] > 0.0 && (w[0] + w[1]).abs() < 1e-12);
    let fit = estimate::fit(&single, &FitConfig::default()).unwrap();
    assert_eq!(fit.existence.status, Existence::Nonexistent);
    assert!(!fit.converged);
}

#[test]
fn home_field_mechanisms_agree() {
    // Team 0 wins every home game and loses every away game.
    let mut r = rng::from_seed(11);
    let mut games = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                continue;
            }
            for _ in 0..2 {
                let home_wins = if a == 0 { true } else if b == 0 { false } else { r.random_bool(0.6) };
                let (w, l) = if home_wins { (a, b) } else { (b, a) };
                let (xw, xl) = if home_wins { (1.0, 0.0) } else { (0.0, 1.0) };
                games.push((w, l, vec![xw], vec![xl]));
            }
        }
    }
    let data = pairwise(4, 1, &games);
    let lp = estimate::check_mle_existence(&data);
    let fit = estimate::fit(&data, &FitConfig::default()).unwrap();
    assert_ne!(lp.status, Existence::Undetermined);
    assert_eq!(lp.status, fit.existence.status);
    assert_eq!(lp.exists(), fit.converged);
}

#[test]
fn lp_witnesses_are_recession_directions() {
    let mut found = 0;
    for seed in 0..60 {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, 5, 1, 2.0);
        let data = random_dataset(&mut r, &theta, 6, 3);
        let report = estimate::check_mle_existence(&data);
        match report.status {
            Existence::Nonexistent => {
                found += 1;
                assert!(is_recession_direction(&data, report.witness.as_ref().unwrap()), "seed {seed}");
            }
            Existence::Exists => assert!(report.witness.is_none()),
            Existence::Undetermined => panic!("seed {seed}: {:?}", report.reason),
        }
    }
    assert!(found > 5);
}

#[test]
fn mm_single_comparison_update() {
    let data = pairwise(2, 0, &[(0, 1, vec![], vec![])]);
    let raw = estimate::mm_update_u_raw(&Params::zeros(2, 0), &data).unwrap();
    assert!((raw[0] - 2f64.ln()).abs() < 1e-15);
    assert!((raw[1] + 1.5f64.ln()).abs() < 1e-15);
    let centered = estimate::mm_update_u(&Params::zeros(2, 0), &data).unwrap();
    assert!(centered.sum().abs() < 1e-15);
}

#[test]
fn mm_fixed_point_at_plain_mle() {
    let mut r = rng::from_seed(31);
    let theta = random_params(&mut r, 10, 0, 1.0);
    let data = well_posed_dataset(&mut r, &theta, 60, 4);
    let fit = estimate::fit(&data, &FitConfig::default()).unwrap();
    assert!(fit.converged);
    let next = estimate::mm_update_u(&fit.theta, &data).unwrap();
    assert!((&next - &fit.theta.u).amax() < 1e-8);
}

/// Root of the scalar score equation by bisection.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn newton_solves_pairwise_logistic_score() {
    let mut r = rng::from_seed(3);
    let games: Vec<_> = (0..30)
        .map(|_| {
            let (xa, xb): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            // True coefficient 0.8; outcomes drawn from the logistic law.
            let a_wins = r.random_bool(1.0 / (1.0 + (-(0.8 * (xa - xb))).exp()));
            if a_wins { (0, 1, vec![xa], vec![xb]) } else { (1, 0, vec![xb], vec![xa]) }
        })
        .collect();
    let data = pairwise(2, 1, &games);
    let deltas: Vec<f64> = games.iter().map(|g| g.2[0] - g.3[0]).collect();
    let score = |v: f64| deltas.iter().map(|d| d / (1.0 + (d * v).exp())).sum::<f64>();
    let root = bisect(score, -20.0, 20.0);
    let mut theta = Params::zeros(2, 1);
    for _ in 0..5 {
        theta.v = estimate::newton_update_v(&theta, &data, 1.0).unwrap();
    }
    assert!((theta.v[0] - root).abs() < 1e-6, "{} vs {root}", theta.v[0]);
    for _ in 0..3 {
        theta.v = estimate::newton_update_v(&theta, &data, 1.0).unwrap();
    }
    assert!((theta.v[0] - root).abs() < 1e-12);
    // Stationary input stays put.
    let again = estimate::newton_update_v(&theta, &data, 1.0).unwrap();
    assert!((again[0] - theta.v[0]).abs() < 1e-12);
}

#[test]
fn order_invariance() {
    let mut r = rng::from_seed(17);
    let theta = random_params(&mut r, 12, 2, 1.0);
    let data = well_posed_dataset(&mut r, &theta, 80, 4);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
    let a = estimate::fit(&data, &FitConfig::default()).unwrap();
    let b = estimate::fit(&data.subset(&idx).unwrap(), &FitConfig::default()).unwrap();
    assert!((a.theta.to_vector() - b.theta.to_vector()).amax() <= 1e-8);
    let again = estimate::fit(&data, &FitConfig::default()).unwrap();
    assert_eq!(a.theta, again.theta);
}

#[test]
fn static_covariate_fit_ties_plain_fit() {
    let mut r = rng::from_seed(23);
    let n = 10;
    let z = normal_matrix(&mut r, n, 2);
    let theta = random_params(&mut r, n, 2, 1.0);
    let base = well_posed_dataset(&mut r, &Params::new(theta.u.iter().copied().collect(), vec![]), 60, 4);
    let comps = base
        .comparisons()
        .iter()
        .map(|c| Comparison::new(c.edge().to_vec(), z.select_rows(c.edge().iter()), c.ranking()).unwrap())
        .collect();
    let with_z = Dataset::new(n, 2, comps).unwrap();
    let cfg = FitConfig { existence: ExistenceMode::Off, ..FitConfig::default() };
    let plain = estimate::fit(&base, &cfg).unwrap();
    let full = estimate::fit(&with_z, &cfg).unwrap();
    assert!((plain.loglik - full.loglik).abs() <= 1e-6);
    let (u, v) = plusdc::design::care_equivalence(&z, &plain.theta.u).unwrap();
    let care = model::log_likelihood(&Params { u, v }, &with_z, false).unwrap();
    assert!((care - plain.loglik).abs() <= 1e-6);
    // The cone check sees the flat direction.
    assert_eq!(estimate::check_mle_existence(&with_z).status, Existence::Nonexistent);
}

#[test]
fn information_criteria_arithmetic() {
    let ic = estimate::information_criteria(-0.5, 2, 0, 10);
    assert_eq!(ic.p, 1);
    assert!((ic.aic_norm - (1.0 + 0.2)).abs() < 1e-15);
    assert!((ic.bic_norm - (1.0 + 10f64.ln() / 10.0)).abs() < 1e-15);
    let horse = estimate::information_criteria(-16.985, 2814, 3, 6328);
    assert!((horse.aic_norm - 34.860).abs() <= 0.01);
    assert!((horse.bic_norm - 37.865).abs() <= 0.01);
    let pl = estimate::information_criteria(-17.671, 2814, 0, 6328);
    assert!((pl.aic_norm - 36.230).abs() <= 0.01);
}

#[test]
fn config_rejects_nonpositive_tolerances() {
    let data = pairwise(2, 0, &[(0, 1, vec![], vec![]), (1, 0, vec![], vec![])]);
    for cfg in [
        FitConfig { epsilon: 0.0, ..FitConfig::default() },
        FitConfig { inner_u_tol: -1.0, ..FitConfig::default() },
        FitConfig { max_outer: 0, ..FitConfig::default() },
    ] {
        assert!(estimate::fit(&data, &cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_invariants(seed in any::<u64>(), n in 3usize..10, d in 0usize..3) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, n, d, 1.0);
        let data = well_posed_dataset(&mut r, &theta, 6 * n, 4);
        let fit = estimate::fit(&data, &FitConfig::default()).unwrap();
        prop_assert!(fit.converged);
        prop_assert_eq!(fit.existence.status, Existence::Exists);
        prop_assert!(fit.theta.u.sum().abs() <= 1e-9);
        prop_assert!(fit.gradient_norm <= 1e-6);
        prop_assert_eq!(fit.mm_monotonicity_violations, 0);
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
        }
        let g = naive_gradient(&fit.theta, &data);
        prop_assert!(g.amax() / data.len() as f64 <= 1e-6);
    }

    #[test]
    fn mm_step_never_lowers_likelihood(seed in any::<u64>(), n in 3usize..10, d in 0usize..3) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, n, d, 2.0);
        let data = random_dataset(&mut r, &theta, 5 * n, 4);
        let start = random_params(&mut r, n, d, 3.0);
        let next = Params { u: estimate::mm_update_u(&start, &data).unwrap(), v: start.v.clone() };
        let before = model::log_likelihood(&start, &data, false).unwrap();
        let after = model::log_likelihood(&next, &data, false).unwrap();
        prop_assert!(after >= before - 1e-12 * before.abs());
    }

    #[test]
    fn minorizer_touches_and_stays_below(seed in any::<u64>(), n in 3usize..8, d in 0usize..3, scale in 0.0f64..2.0) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, n, d, 1.0);
        let data = random_dataset(&mut r, &theta, 4 * n, 4);
        let u_ref = random_params(&mut r, n, 0, 1.0).u;
        let dir = random_params(&mut r, n, 0, 1.0).u;
        let l_at = |u: &DVector<f64>| model::log_likelihood(&Params { u: u.clone(), v: theta.v.clone() }, &data, false).unwrap();
        let q_ref = estimate::minorizer_q(&u_ref, &u_ref, &theta.v, &data).unwrap();
        prop_assert!((q_ref - l_at(&u_ref)).abs() <= 1e-10 * q_ref.abs().max(1.0));
        let u = &u_ref + &dir * scale;
        let q = estimate::minorizer_q(&u, &u_ref, &theta.v, &data).unwrap();
        prop_assert!(q <= l_at(&u) + 1e-10 * q.abs().max(1.0));
    }
}

mod common;

use common::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use plusdc::model::{self, Comparison, Dataset, Params};
use plusdc::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_comparison(seed: u64, m: usize, d: usize) -> (Params, Comparison) {
    let mut r = rng::from_seed(seed);
    let n = m + 2;
    let theta = random_params(&mut r, n, d, 2.0);
    let objects = rand::seq::index::sample(&mut r, n, m).into_vec();
    let c = Comparison::new(objects, normal_matrix(&mut r, m, d), None).unwrap();
    (theta, c)
}

fn ids(c: &Comparison, positions: &[usize]) -> Vec<usize> {
    positions.iter().map(|&j| c.edge()[j]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outcome_probabilities_sum_to_one(seed in any::<u64>(), m in 2usize..=5, d in 0usize..=3) {
        let (theta, c) = random_comparison(seed, m, d);
        let total: f64 = permutations(m).iter().map(|p| model::outcome_prob(&theta, &c, &ids(&c, p)).unwrap()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum = {total}");
    }

    #[test]
    fn outcome_prob_matches_naive_product(seed in any::<u64>(), m in 2usize..=5, d in 0usize..=3) {
        let (theta, c) = random_comparison(seed, m, d);
        let s: Vec<f64> = (0..m).map(|j| naive_score(&theta, &c, j)).collect();
        for p in permutations(m) {
            let got = model::outcome_prob(&theta, &c, &ids(&c, &p)).unwrap();
            prop_assert!((got - naive_ranking_prob(&s, &p)).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_k_equals_sum_over_completions(seed in any::<u64>(), m in 2usize..=5, k in 1usize..=5) {
        let k = k.min(m);
        let (theta, c) = random_comparison(seed, m, 2);
        let perms = permutations(m);
        let prefix = &perms[seed as usize % perms.len()][..k];
        let brute: f64 = perms
            .iter()
            .filter(|p| &p[..k] == prefix)
            .map(|p| model::outcome_prob(&theta, &c, &ids(&c, p)).unwrap())
            .sum();
        let got = model::top_k_prob(&theta, &c, &ids(&c, prefix)).unwrap();
        prop_assert!((got - brute).abs() <= 1e-12, "{got} vs {brute}");
    }

    #[test]
    fn utilities_are_shift_invariant(seed in any::<u64>(), m in 2usize..=5, shift in -50.0f64..50.0) {
        let (theta, c) = random_comparison(seed, m, 2);
        let mut shifted = theta.clone();
        shifted.u.add_scalar_mut(shift);
        for p in permutations(m) {
            let pi = ids(&c, &p);
            let a = model::outcome_prob(&theta, &c, &pi).unwrap();
            let b = model::outcome_prob(&shifted, &c, &pi).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pairwise_marginals_follow_luce(seed in any::<u64>(), m in 2usize..=5) {
        let (theta, c) = random_comparison(seed, m, 2);
        let s: Vec<f64> = (0..m).map(|j| naive_score(&theta, &c, j)).collect();
        for a in 0..m {
            for b in a + 1..m {
                let marginal: f64 = permutations(m)
                    .iter()
                    .filter(|p| p.iter().position(|&x| x == a) < p.iter().position(|&x| x == b))
                    .map(|p| model::outcome_prob(&theta, &c, &ids(&c, p)).unwrap())
                    .sum();
                let two = 1.0 / (1.0 + (s[b] - s[a]).exp());
                prop_assert!((marginal - two).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn likelihood_matches_naive_sum(seed in any::<u64>(), d in 0usize..=3) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, 8, d, 1.5);
        let data = random_dataset(&mut r, &theta, 25, 5);
        let l = model::log_likelihood(&theta, &data, false).unwrap();
        let naive = naive_loglik(&theta, &data);
        prop_assert!((l - naive).abs() <= 1e-10 * naive.abs().max(1.0));
        let ln = model::log_likelihood(&theta, &data, true).unwrap();
        prop_assert!((ln - l / data.len() as f64).abs() <= 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_naive_and_edge_sums_vanish(seed in any::<u64>(), d in 0usize..=3) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, 8, d, 1.5);
        let data = random_dataset(&mut r, &theta, 25, 5);
        let g = model::gradient(&theta, &data).unwrap();
        let naive = naive_gradient(&theta, &data);
        prop_assert!((&g - &naive).amax() <= 1e-10);
        // The u-block of each comparison's gradient sums to zero.
        for c in data.comparisons() {
            let one = Dataset::new(8, d, vec![c.clone()]).unwrap();
            let gu = model::gradient(&theta, &one).unwrap();
            prop_assert!(gu.rows(0, 8).sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn sampler_returns_a_permutation(seed in any::<u64>(), m in 2usize..=6) {
        let (theta, c) = random_comparison(seed, m, 1);
        let mut r = rng::from_seed(seed ^ 1);
        let mut pi = model::sample_outcome(&theta, &c, &mut r).unwrap();
        pi.sort_unstable();
        prop_assert_eq!(pi, c.edge().to_vec());
    }
}

fn finite_difference_gradient(theta: &Params, data: &Dataset, h: f64) -> DVector<f64> {
    let n = theta.n();
    let x = theta.to_vector();
    DVector::from_fn(x.len(), |k, _| {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += h;
        minus[k] -= h;
        let lp = model::log_likelihood(&Params::from_vector(&plus, n), data, false).unwrap();
        let lm = model::log_likelihood(&Params::from_vector(&minus, n), data, false).unwrap();
        (lp - lm) / (2.0 * h)
    })
}

fn finite_difference_hessian(theta: &Params, data: &Dataset, h: f64) -> DMatrix<f64> {
    let n = theta.n();
    let x = theta.to_vector();
    let p = x.len();
    let mut out = DMatrix::zeros(p, p);
    for k in 0..p {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += h;
        minus[k] -= h;
        let gp = model::gradient(&Params::from_vector(&plus, n), data).unwrap();
        let gm = model::gradient(&Params::from_vector(&minus, n), data).unwrap();
        out.set_column(k, &((gp - gm) / (2.0 * h)));
    }
    out
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    diff / scale
}

#[test]
fn derivatives_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::from_seed(500 + seed);
        let d = (seed % 4) as usize;
        let theta = random_params(&mut r, 7, d, 1.0);
        let data = random_dataset(&mut r, &theta, 20, 4);
        let g = model::gradient(&theta, &data).unwrap();
        let fd = finite_difference_gradient(&theta, &data, 1e-6);
        assert!(relative_error(g.as_slice(), fd.as_slice()) <= 1e-5, "seed {seed}");
        let h = model::hessian(&theta, &data).unwrap();
        let fdh = finite_difference_hessian(&theta, &data, 1e-5);
        assert!(relative_error(h.as_slice(), fdh.as_slice()) <= 1e-4, "seed {seed}");
        assert!((&h - h.transpose()).amax() <= 1e-12);
        let top = SymmetricEigen::new(h).eigenvalues.max();
        assert!(top <= 1e-10, "seed {seed}: max eigenvalue {top}");
    }
}

#[test]
fn sampler_matches_enumerated_distribution() {
    for (seed, m) in [(1u64, 2usize), (2, 3), (3, 4)] {
        let (theta, c) = random_comparison(seed, m, 2);
        let perms = permutations(m);
        let key = |pi: &[usize]| perms.iter().position(|p| ids(&c, p) == pi).unwrap();
        let mut counts = vec![0usize; perms.len()];
        let mut r = rng::from_seed(seed + 100);
        let draws = 100_000;
        for _ in 0..draws {
            counts[key(&model::sample_outcome(&theta, &c, &mut r).unwrap())] += 1;
        }
        let stat: f64 = perms
            .iter()
            .zip(&counts)
            .map(|(p, &o)| {
                let e = draws as f64 * model::outcome_prob(&theta, &c, &ids(&c, p)).unwrap();
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let pval = chi_square_sf(stat, perms.len() - 1);
        assert!(pval > 0.01, "m = {m}: chi2 = {stat}, p = {pval}");
    }
}

#[test]
fn equal_scores_sample_uniformly() {
    let c = Comparison::new(vec![0, 1, 2], DMatrix::zeros(3, 0), None).unwrap();
    let theta = Params::zeros(3, 0);
    let perms = permutations(3);
    let mut counts = vec![0usize; 6];
    let mut r = rng::from_seed(77);
    for _ in 0..60_000 {
        let pi = model::sample_outcome(&theta, &c, &mut r).unwrap();
        counts[perms.iter().position(|p| *p == pi).unwrap()] += 1;
    }
    let se = (60_000.0 * (1.0 / 6.0) * (5.0 / 6.0f64)).sqrt();
    for &k in &counts {
        assert!((k as f64 - 10_000.0).abs() <= 3.0 * se, "{counts:?}");
    }
}

#[test]
fn likelihood_stays_finite_for_large_parameters() {
    let mut r = rng::from_seed(9);
    let mut theta = Params::new((0..6).map(|_| r.random_range(-700.0..700.0)).collect(), vec![]);
    theta.u[0] = 700.0;
    theta.u[1] = -700.0;
    let data = random_dataset(&mut r, &theta, 15, 4);
    assert!(model::log_likelihood(&theta, &data, false).unwrap().is_finite());
    assert!(model::gradient(&theta, &data).unwrap().iter().all(|x| x.is_finite()));
    assert!(model::hessian(&theta, &data).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn home_field_probability() {
    // Home team carries X = 1 and v is the log home advantage.
    let theta = Params::new(vec![0.0, 0.0], vec![1.0]);
    let c = Comparison::new(vec![0, 1], DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), None).unwrap();
    let p = model::win_probabilities(&theta, &c).unwrap();
    let e = 1f64.exp();
    assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
    assert!((p[0] - 0.731059).abs() < 1e-6);
}

#[test]
fn missing_outcomes_are_rejected() {
    let c = Comparison::new(vec![0, 1], DMatrix::zeros(2, 0), None).unwrap();
    let data = Dataset::new(2, 0, vec![c]).unwrap();
    assert!(model::log_likelihood(&Params::zeros(2, 0), &data, false).is_err());
    assert!(model::gradient(&Params::zeros(2, 0), &data).is_err());
}

#[test]
fn invalid_permutations_are_rejected() {
    let c = Comparison::new(vec![0, 1, 2], DMatrix::zeros(3, 0), None).unwrap();
    let theta = Params::zeros(3, 0);
    assert!(model::outcome_prob(&theta, &c, &[0, 1]).is_err());
    assert!(model::outcome_prob(&theta, &c, &[0, 1, 1]).is_err());
    assert!(model::top_k_prob(&theta, &c, &[0, 5]).is_err());
    assert!(model::top_k_prob(&theta, &c, &[2, 2]).is_err());
}

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use plusdc::design::{self, CurlStatus, RankMethod};
use plusdc::model::{self, Comparison, Dataset, Params};
use plusdc::{rng, Error};
use proptest::prelude::*;
use rand::Rng;

/// Orthonormal basis of the column space, by SVD.
fn range_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let u = svd.u.unwrap();
    let cols: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-9 * smax.max(1.0)).collect();
    u.select_columns(cols.iter())
}

fn dense_incoherence(dm: &design::DesignMatrices) -> f64 {
    let bq = range_basis(&dm.q().transpose());
    let bk = range_basis(dm.k());
    if bk.ncols() == 0 {
        return 0.0;
    }
    (bq.transpose() * bk).singular_values().max().min(1.0)
}

fn gaussian_design(seed: u64, n: usize, num: usize, d: usize) -> Dataset {
    let mut r = rng::from_seed(seed);
    let comps = (0..num)
        .map(|i| {
            let a = i % n;
            let mut b = r.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Comparison::new(vec![a, b], normal_matrix(&mut r, 2, d), None).unwrap()
        })
        .collect();
    Dataset::new(n, d, comps).unwrap()
}

fn static_dataset(seed: u64, n: usize, d: usize, num: usize) -> (DMatrix<f64>, Dataset) {
    let mut r = rng::from_seed(seed);
    let z = normal_matrix(&mut r, n, d);
    let theta = random_params(&mut r, n, 0, 1.0);
    let mut comps = Vec::new();
    for i in 0..num {
        let m = r.random_range(2..=4);
        let mut objects = rand::seq::index::sample(&mut r, n, m).into_vec();
        if i < n && !objects.contains(&i) {
            objects[0] = i;
        }
        let x = z.select_rows(objects.iter());
        let mut c = Comparison::new(objects, x.clone(), None).unwrap();
        let plain = Comparison::new(c.edge().to_vec(), DMatrix::zeros(m, 0), None).unwrap();
        c.set_ranking(&model::sample_outcome(&theta, &plain, &mut r).unwrap()).unwrap();
        comps.push(c);
    }
    (z, Dataset::new(n, d, comps).unwrap())
}

#[test]
fn toy_matrices_match_printed_values() {
    let c1 = Comparison::new(
        vec![0, 1, 2, 3],
        DMatrix::from_row_slice(4, 2, &[-1.0, 1.0, 3.0, -1.0, -4.0, 2.0, 0.0, -3.0]),
        Some(vec![0, 2, 3, 1]),
    )
    .unwrap();
    let c3 = Comparison::new(vec![1, 3], DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -3.0, 4.0]), None).unwrap();
    assert_eq!(design::delta_x(&c1), DMatrix::from_row_slice(3, 2, &[4.0, -2.0, -3.0, 1.0, 1.0, -4.0]));
    assert_eq!(design::delta_x(&c3), DMatrix::from_row_slice(1, 2, &[-3.0, 5.0]));
    let same = Comparison::new(vec![0, 1, 2], DMatrix::from_element(3, 2, 0.7), None).unwrap();
    assert_eq!(design::delta_x(&same), DMatrix::zeros(2, 2));
}

#[test]
fn two_disjoint_pairs_give_block_incidence() {
    let comps = vec![
        Comparison::new(vec![0, 1], DMatrix::zeros(2, 0), None).unwrap(),
        Comparison::new(vec![2, 3], DMatrix::zeros(2, 0), None).unwrap(),
    ];
    let dm = design::assemble(&Dataset::new(4, 0, comps).unwrap()).unwrap();
    let q = DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
    assert_eq!(dm.q(), q);
    assert_eq!(design::incidence_rank(&dm), 2);
}

#[test]
fn care_small_example() {
    let z = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -1.0]);
    let (u, v) = design::care_equivalence(&z, &DVector::from_vec(vec![1.0, 0.0, -1.0])).unwrap();
    assert!((v[0] - 1.0).abs() < 1e-14);
    assert!(u.amax() < 1e-14);
    // Z'u = 0 already: nothing moves.
    let ut = DVector::from_vec(vec![1.0, -2.0, 1.0]);
    let (u, v) = design::care_equivalence(&z, &ut).unwrap();
    assert!(v.amax() < 1e-14 && (&u - &ut).amax() < 1e-14);
}

#[test]
fn care_rejects_violated_hypotheses() {
    let ones = DMatrix::from_element(4, 1, 2.0);
    assert!(matches!(design::care_equivalence(&ones, &DVector::zeros(4)), Err(Error::Precondition(_))));
    let dup = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 0.0, -1.0, -2.0]);
    assert!(matches!(design::care_equivalence(&dup, &DVector::zeros(3)), Err(Error::Precondition(_))));
}

#[test]
fn static_covariates_make_incoherence_one() {
    let (_, data) = static_dataset(4, 8, 2, 30);
    let dm = design::assemble(&data).unwrap();
    let diag = design::consistency_diagnostics(&dm).unwrap();
    assert!((diag.incoherence_cos - 1.0).abs() < 1e-8);
    assert!(!design::identifiability_check(&dm).identifiable);
    assert_ne!(design::curl_sufficient_check(&dm, data.graph()).unwrap().status, CurlStatus::Pass);
}

#[test]
fn gaussian_design_diagnostics() {
    for seed in 0..3 {
        let data = gaussian_design(seed, 50, 2000, 3);
        let dm = design::assemble(&data).unwrap();
        let diag = design::consistency_diagnostics(&dm).unwrap();
        assert!((diag.incoherence_cos - dense_incoherence(&dm)).abs() < 1e-8);
        assert!(diag.incoherence_cos <= 5.0 * (53.0f64 / 2000.0).sqrt());
        assert!(diag.sigma_min_k >= 0.2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn curl_two_routes_agree(seed in any::<u64>(), n in 3usize..9, d in 1usize..4) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, n, d, 1.0);
        let data = random_dataset(&mut r, &theta, 3 * n, 4);
        let dm = design::assemble(&data).unwrap();
        let (tris, _) = design::triangles(&dm, 5000);
        let a = design::curl_matrix(&dm, &tris).unwrap();
        let b = design::curl_from_covariates(&data, &tris).unwrap();
        prop_assert!(tris.is_empty() || (&a - &b).amax() <= 1e-12);
        let report = design::curl_sufficient_check(&dm, data.graph()).unwrap();
        if report.passes() {
            prop_assert!(design::identifiability_check(&dm).identifiable);
            let t = design::curl_matrix(&dm, &report.triangles).unwrap();
            prop_assert!((t.determinant() - report.det.unwrap()).abs() <= 1e-9 * t.amax().powi(d as i32).max(1.0));
        }
    }

    #[test]
    fn incidence_rank_tracks_connectivity(seed in any::<u64>(), n in 2usize..10, e in 1usize..12) {
        let mut r = rng::from_seed(seed);
        let comps = (0..e)
            .map(|_| {
                let m = r.random_range(2..=3.min(n));
                Comparison::new(rand::seq::index::sample(&mut r, n, m).into_vec(), DMatrix::zeros(m, 0), None).unwrap()
            })
            .collect();
        let data = Dataset::new(n, 0, comps).unwrap();
        let dm = design::assemble(&data).unwrap();
        let rank = design::incidence_rank(&dm);
        prop_assert_eq!(rank == n - 1, data.graph().is_connected());
        prop_assert_eq!(rank, dm.q().rank(1e-9));
        prop_assert_eq!(dm.q().row_sum().amax(), 0.0);
    }

    #[test]
    fn rank_routes_agree_and_ignore_order(seed in any::<u64>(), n in 3usize..10, d in 0usize..4, num in 2usize..20) {
        let mut r = rng::from_seed(seed);
        let theta = random_params(&mut r, n, d, 1.0);
        let data = random_dataset(&mut r, &theta, num, 3);
        let dm = design::assemble(&data).unwrap();
        let dense = design::identifiability_check_with(&dm, RankMethod::DenseSvd);
        let proj = design::identifiability_check_with(&dm, RankMethod::LaplacianProjection);
        prop_assert_eq!(dense.rank, proj.rank);
        prop_assert_eq!(dense.identifiable, proj.identifiable);
        prop_assert_eq!(dense.rank, dm.w().rank(1e-9 * dm.w().amax().max(1.0)));
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.reverse();
        let flipped = design::assemble(&data.subset(&idx).unwrap()).unwrap();
        prop_assert_eq!(design::identifiability_check(&flipped).rank, dense.rank);
        if let Some(w) = dense.witness {
            let w = DVector::from_vec(w);
            prop_assert!((dm.w() * &w).amax() <= 1e-8 * w.amax());
            prop_assert!(w.rows(0, n).sum().abs() <= 1e-8 * w.amax());
        }
    }

    #[test]
    fn care_constraints_and_likelihood(seed in any::<u64>(), n in 4usize..12, d in 1usize..3) {
        let (z, data) = static_dataset(seed, n, d, 4 * n);
        let mut r = rng::from_seed(seed ^ 7);
        let mut ut = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        ut.add_scalar_mut(-ut.mean());
        let (u, v) = design::care_equivalence(&z, &ut).unwrap();
        prop_assert!(u.sum().abs() <= 1e-9);
        prop_assert!((z.transpose() * &u).amax() <= 1e-9);
        let plain = Params { u: ut.clone(), v: DVector::zeros(d) };
        let care = Params { u, v };
        let a = model::log_likelihood(&plain, &data, false).unwrap();
        let b = model::log_likelihood(&care, &data, false).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

mod common;

use common::*;
use fpl_core::projection::{reconstruct, reconstruct_with_form, GramForm};
use fpl_core::{build_pool, FeatureMap, Matrix};
use proptest::prelude::*;

const DELTAS: [f64; 3] = [1e-3, 1.0, 1e3];

fn instance(seed: u64, h: usize, w: usize, c: usize, shots: usize) -> (FeatureMap, fpl_core::ClassPrototypePool) {
    let mut r = rng(seed);
    let query = random_map(&mut r, h, w, c, false);
    let support: Vec<FeatureMap> = (0..shots).map(|_| random_map(&mut r, h, w, c, false)).collect();
    (query, build_pool(0, &support).unwrap())
}

#[test]
fn gauss_solve_small_system() {
    let x = gauss_solve(vec![vec![0.0, 2.0], vec![3.0, 1.0]], vec![4.0, 5.0]);
    assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
}

#[test]
fn brute_force_oracle_scalar_case() {
    // θ* = 1/(1+1) for M = F = [1, 0], δ = 1
    let m = Matrix::from_rows(&[[1.0, 0.0]]);
    let out = brute_force_reconstruction(&m, &m, 1.0);
    assert!((out[(0, 0)] - 0.5).abs() < 1e-15);
}

#[test]
fn closed_form_matches_normal_equations() {
    let mut checked = 0;
    for seed in 0..100u64 {
        let c = 1 + (seed % 4) as usize;
        let (h, w) = if seed % 3 == 0 { (1, 2) } else { (1, 1) };
        let shots = 1 + (seed as usize / 7) % (4 / (h * w));
        for delta in DELTAS {
            let (query, pool) = instance(seed, h, w, c, shots);
            let got = reconstruct(&query, &pool, delta).unwrap().reconstructed;
            let want = brute_force_reconstruction(query.values(), pool.pool(), delta);
            let err = rel_frobenius(&got, &want);
            assert!(err < 1e-8, "seed {seed} δ {delta} C {c} NHW {}: {err:e}", pool.pool().rows());
            checked += 1;
        }
    }
    assert_eq!(checked, 300);
}

#[test]
fn channel_and_sample_forms_agree() {
    let mut r = rng(99);
    let mut saw = (false, false);
    for i in 0..100u64 {
        let c = 2 + (r.random_range(0..15usize));
        let rows = 1 + (r.random_range(0..32usize));
        saw.0 |= c > rows;
        saw.1 |= c < rows;
        let (query, pool) = instance(1000 + i, rows, 1, c, 1);
        for delta in DELTAS {
            let a = reconstruct_with_form(&query, &pool, delta, GramForm::Channel).unwrap();
            let b = reconstruct_with_form(&query, &pool, delta, GramForm::Sample).unwrap();
            assert!(rel_frobenius(&a.reconstructed, &b.reconstructed) < 1e-8, "C {c} NHW {rows} δ {delta}");
            assert!(close_rel(a.distance, b.distance, 1e-8, 1e-14));
        }
    }
    assert!(saw.0 && saw.1);
}

use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_duality(seed in any::<u64>(), c in 2usize..17, rows in 1usize..33, di in 0usize..3) {
        let (query, pool) = instance(seed, rows, 1, c, 1);
        let delta = DELTAS[di];
        let a = reconstruct_with_form(&query, &pool, delta, GramForm::Channel).unwrap();
        let b = reconstruct_with_form(&query, &pool, delta, GramForm::Sample).unwrap();
        prop_assert!(rel_frobenius(&a.reconstructed, &b.reconstructed) < 1e-8);
        // absolute round-off scales with the distance itself
        prop_assert!(close_rel(a.ddistance_dmu, b.ddistance_dmu, 1e-7, 1e-10 * (1.0 + a.distance)));
    }

    #[test]
    fn stationarity_at_optimum(seed in any::<u64>(), c in 1usize..7, shots in 1usize..4, di in 0usize..3) {
        // (M − M̄)FᵀF = δ M̄ follows from θ*(FFᵀ + δI) = MFᵀ with M̄ = θ*F
        let (query, pool) = instance(seed, 2, 1, c, shots);
        let delta = DELTAS[di];
        let rec = reconstruct(&query, &pool, delta).unwrap();
        let resid = query.values().sub(&rec.reconstructed).unwrap();
        let lhs = resid.matmul(pool.gram()).unwrap();
        let rhs = rec.reconstructed.scaled(delta);
        let scale = 1.0 + lhs.max_abs().max(rhs.max_abs());
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-8 * scale);
    }

    #[test]
    fn shrinkage_is_monotone_in_row_space(seed in any::<u64>(), c in 1usize..9, shots in 1usize..4) {
        let mut r = rng(seed);
        let support: Vec<FeatureMap> = (0..shots).map(|_| random_map(&mut r, 1, 2, c, false)).collect();
        let pool = build_pool(0, &support).unwrap();
        // query rows are combinations of pool rows
        let coef = random_matrix(&mut r, 2, pool.pool().rows());
        let query = FeatureMap::new(1, 2, coef.matmul(pool.pool()).unwrap()).unwrap();
        let mut last = 0.0;
        for k in -12..=12 {
            let d = reconstruct(&query, &pool, 10f64.powi(k)).unwrap().distance;
            prop_assert!(d >= last - 1e-12 * (1.0 + last), "δ=1e{k}: {d} < {last}");
            last = d;
        }
    }

    #[test]
    fn distance_gradient_matches_finite_differences(seed in any::<u64>(), c in 1usize..10, shots in 1usize..4, mu in -3.0f64..3.0) {
        let (query, pool) = instance(seed, 2, 2, c, shots);
        let h = 1e-5;
        let at = |m: f64| reconstruct(&query, &pool, m.exp()).unwrap().distance;
        let fd = (at(mu + h) - at(mu - h)) / (2.0 * h);
        let analytic = reconstruct(&query, &pool, mu.exp()).unwrap().ddistance_dmu;
        prop_assert!(close_rel(analytic, fd, 1e-4, 1e-9), "analytic {analytic} fd {fd}");
    }

    #[test]
    fn distance_is_residual_energy_per_location(seed in any::<u64>(), c in 1usize..6, di in 0usize..3) {
        let (query, pool) = instance(seed, 2, 3, c, 2);
        let rec = reconstruct(&query, &pool, DELTAS[di]).unwrap();
        let resid = query.values().sub(&rec.reconstructed).unwrap();
        let energy: f64 = resid.as_slice().iter().map(|x| x * x).sum();
        prop_assert!(close_rel(rec.distance, energy / 6.0, 1e-12, 1e-15));
    }
}


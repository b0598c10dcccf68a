mod common;

use approx::assert_relative_eq;
use fisher_release::correlated::{
    build_invariance_operator, correlated_certificate, correlated_obfuscate, sample_correlated, support_objective,
    CorrelatedMechanism, InvarianceOperator,
};
use fisher_release::scaling::ScalingMatrix;
use fisher_release::stream::RandomStream;
use fisher_release::svm::{train_svm, SvmConfig};
use fisher_release::synthetic::BlobSpec;
use fisher_release::Error;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

fn random_parts(seed: u64, q: usize, p: usize) -> (DVector<f64>, DVector<f64>) {
    let mut rng = RandomStream::new(seed, 40).rng();
    let c = DVector::from_fn(q, |_, _| {
        // some rows sit off the support
        if rng.random::<f64>() < 0.3 {
            0.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let alpha = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
    (c, alpha)
}

/// `[c' (x) I_p ; I_q (x) alpha']` assembled with Kronecker products.
fn omega_oracle(c: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64> {
    let (q, p) = (c.len(), alpha.len());
    let top = c.transpose().kronecker(&DMatrix::<f64>::identity(p, p));
    let bottom = DMatrix::<f64>::identity(q, q).kronecker(&alpha.transpose());
    let mut m = DMatrix::zeros(p + q, q * p);
    m.rows_mut(0, p).copy_from(&top);
    m.rows_mut(p, q).copy_from(&bottom);
    m
}

/// Rank and null-space projector from a dense SVD of `Omega' Omega`.
fn svd_null_projector(omega: &DMatrix<f64>) -> (usize, DMatrix<f64>) {
    let n = omega.ncols();
    let eig = SymmetricEigen::new(omega.transpose() * omega);
    let top = eig.eigenvalues.amax();
    let mut proj = DMatrix::zeros(n, n);
    let mut rank = 0;
    for k in 0..n {
        if eig.eigenvalues[k] > 1e-12 * top.max(1e-300) {
            rank += 1;
        } else {
            let v = eig.eigenvectors.column(k);
            proj += v * v.transpose();
        }
    }
    (rank, proj)
}

#[test]
fn omega_matches_kronecker_construction() {
    for seed in 0..20 {
        let (c, alpha) = random_parts(seed, 5, 3);
        let op = InvarianceOperator::from_parts(c.clone(), alpha.clone()).unwrap();
        let oracle = omega_oracle(&c, &alpha);
        assert_eq!(op.omega_matrix(), oracle);
        assert_relative_eq!(op.omega_frobenius(), oracle.norm(), max_relative = 1e-12);
        let w = DVector::from_fn(15, |i, _| (i as f64).sin());
        assert!((op.apply_omega(&w).unwrap() - &oracle * &w).amax() < 1e-12);
    }
}

#[test]
fn hand_example_two_by_two() {
    let op = InvarianceOperator::from_parts(DVector::from_vec(vec![1.0, -1.0]), DVector::from_vec(vec![0.0, 2.0])).unwrap();
    let expect = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, -1.0, 0.0, //
            0.0, 1.0, 0.0, -1.0, //
            0.0, 2.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 2.0,
        ],
    );
    assert_eq!(op.omega_matrix(), expect);
    assert_eq!(op.rank(), 3);
    assert_eq!(op.null_dim(), 1);
    // the one surviving direction moves feature 0 of both rows together
    let psi = op.psi_matrix();
    let v = psi.column(0) * psi[(0, 0)].signum();
    let h = 0.5f64.sqrt();
    assert!((v - DVector::from_vec(vec![h, 0.0, h, 0.0])).amax() < 1e-12);
}

#[test]
fn basis_agrees_with_dense_svd_on_random_instances() {
    for seed in 0..100u64 {
        let mut rng = RandomStream::new(seed, 41).rng();
        let q = rng.random_range(2..9usize);
        let p = rng.random_range(1..6usize);
        let (c, alpha) = random_parts(seed, q, p);
        let op = match InvarianceOperator::from_parts(c.clone(), alpha.clone()) {
            Ok(op) => op,
            Err(Error::TrivialNullSpace { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let omega = omega_oracle(&c, &alpha);
        let (rank, proj) = svd_null_projector(&omega);
        assert_eq!(op.rank(), rank, "seed {seed}");
        assert_eq!(op.null_dim(), q * p - rank, "seed {seed}");

        let psi = op.psi_matrix();
        let d = psi.ncols();
        assert!((psi.transpose() * &psi - DMatrix::<f64>::identity(d, d)).amax() < 1e-10);
        assert!((&omega * &psi).norm() <= 1e-8 * omega.norm());
        assert!((&psi * psi.transpose() - proj).amax() < 1e-8, "seed {seed}");
    }
}

#[test]
fn singular_values_are_the_three_norms() {
    for seed in 0..10u64 {
        let (mut c, alpha) = random_parts(seed, 6, 4);
        c[0] = 1.5;
        let op = InvarianceOperator::from_parts(c.clone(), alpha.clone()).unwrap();
        let sv = op.omega_matrix().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().filter(|s| *s > 1e-9).collect();
        sv.sort_by(f64::total_cmp);
        let (cn, an) = (c.norm(), alpha.norm());
        let mut expect = vec![cn; 3];
        expect.extend(vec![an; 5]);
        expect.push((cn * cn + an * an).sqrt());
        expect.sort_by(f64::total_cmp);
        assert_eq!(sv.len(), expect.len());
        for (a, b) in sv.iter().zip(&expect) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
    }
}

#[test]
fn trivial_null_space_is_an_error() {
    let err = InvarianceOperator::from_parts(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0])).unwrap_err();
    assert!(matches!(err, Error::TrivialNullSpace { q: 1, p: 1 }));
    // one feature with alpha != 0 pins every row
    let err = InvarianceOperator::from_parts(DVector::zeros(4), DVector::from_vec(vec![2.0])).unwrap_err();
    assert!(matches!(err, Error::TrivialNullSpace { .. }));
}

#[test]
fn samples_stay_in_the_null_space() {
    let (c, alpha) = random_parts(3, 7, 4);
    let op = InvarianceOperator::from_parts(c, alpha).unwrap();
    let mech = CorrelatedMechanism::new(op.clone(), 25.0).unwrap();
    for t in 0..200 {
        let w = sample_correlated(&mech, RandomStream::new(5, 0).fork(t));
        assert!(op.apply_omega(&w).unwrap().norm() <= 1e-8 * w.norm().max(1e-300));
    }
    let zero = CorrelatedMechanism::new(op.clone(), 0.0).unwrap();
    let w = sample_correlated(&zero, RandomStream::new(5, 0));
    assert_eq!(w, DVector::zeros(28));
    assert!(CorrelatedMechanism::new(op, -1.0).is_err());
}

#[test]
fn null_space_coordinates_have_covariance_m_identity() {
    let (c, alpha) = random_parts(8, 3, 3);
    let op = InvarianceOperator::from_parts(c, alpha).unwrap();
    let d = op.null_dim();
    let m = 4.0;
    let mech = CorrelatedMechanism::new(op.clone(), m).unwrap();
    let n = 100_000;
    let mut acc = DMatrix::zeros(d, d);
    let stream = RandomStream::new(21, 0);
    for t in 0..n {
        let z = op.psi_transpose(&sample_correlated(&mech, stream.fork(t))).unwrap();
        acc += &z * z.transpose();
    }
    let cov = acc / n as f64;
    let tol = 5.0 * m * (2.0 / n as f64).sqrt();
    assert!((cov - DMatrix::<f64>::identity(d, d) * m).amax() < tol);
}

#[test]
fn implied_covariance_is_capped_and_annihilated() {
    let (c, alpha) = random_parts(13, 5, 3);
    let op = InvarianceOperator::from_parts(c, alpha).unwrap();
    let omega = op.omega_matrix();
    let m = 3.0;
    let v = CorrelatedMechanism::new(op.clone(), m).unwrap().covariance_implied();
    let eig = SymmetricEigen::new(v.clone()).eigenvalues;
    let mut at_m = 0;
    for e in eig.iter() {
        assert!(e.abs() < 1e-10 || (e - m).abs() < 1e-10, "eigenvalue {e}");
        if (e - m).abs() < 1e-10 {
            at_m += 1;
        }
    }
    assert_eq!(at_m, op.null_dim());
    assert!((v * omega.transpose()).amax() < 1e-10);
}

#[test]
fn retraining_on_release_reproduces_solution() {
    let data = BlobSpec::two_blobs().generate(RandomStream::new(20190601, 2)).unwrap();
    let config = SvmConfig::default();
    let sol = train_svm(&data, &config).unwrap();
    for t in 0..50 {
        let (released, _) = correlated_obfuscate(&data, &sol, 100.0, RandomStream::new(7, 1).fork(t)).unwrap();
        assert!((released.stacked() - data.stacked()).norm() > 1.0);
        let again = train_svm(&released, &config).unwrap();
        assert!((&again.alpha - &sol.alpha).amax() < 1e-6, "trial {t}");
        assert!((again.beta - sol.beta).abs() < 1e-6, "trial {t}");
        assert!((&again.xi - &sol.xi).amax() < 1e-6, "trial {t}");
    }
}

#[test]
fn floors_scale_linearly_in_m() {
    let data = common::random_binary_dataset(4, 30, 3);
    let sol = train_svm(&data, &SvmConfig::default()).unwrap();
    let op = build_invariance_operator(&sol, &data).unwrap();
    let pi = ScalingMatrix::new(common::random_spd(9, 3, 0.5)).unwrap();
    let one = correlated_certificate(&CorrelatedMechanism::new(op.clone(), 1.0).unwrap(), &pi).unwrap();
    let two = correlated_certificate(&CorrelatedMechanism::new(op, 2.0).unwrap(), &pi).unwrap();
    assert_relative_eq!(two.weak_floor, 2.0 * one.weak_floor, max_relative = 1e-12);
    assert_relative_eq!(two.support_floor.unwrap(), 2.0 * one.support_floor.unwrap(), max_relative = 1e-12);
    assert!(one.crb_floor.is_infinite());
}

#[test]
fn floors_match_dense_computation() {
    let data = common::random_binary_dataset(11, 20, 3);
    let sol = train_svm(&data, &SvmConfig::default()).unwrap();
    let op = build_invariance_operator(&sol, &data).unwrap();
    let pi_m = common::random_spd(12, 3, 0.5);
    let pi = ScalingMatrix::new(pi_m.clone()).unwrap();
    let m = 7.0;
    let cert = correlated_certificate(&CorrelatedMechanism::new(op.clone(), m).unwrap(), &pi).unwrap();

    let psi = op.psi_matrix();
    let proj = &psi * psi.transpose();
    let pi_inv = pi_m.clone().try_inverse().unwrap();
    let big = DMatrix::<f64>::identity(20, 20).kronecker(&pi_inv);
    assert_relative_eq!(cert.weak_floor, m / (big * &proj).trace(), max_relative = 1e-10);

    let support = (0..20)
        .map(|i| (&pi_m * proj.view((3 * i, 3 * i), (3, 3)) * m).trace())
        .fold(f64::INFINITY, f64::min);
    assert_relative_eq!(cert.support_floor.unwrap(), support, max_relative = 1e-10);
}

#[test]
fn equal_variances_minimize_support_objective() {
    let mut rng = RandomStream::new(30, 0).rng();
    for seed in 0..10u64 {
        let q = rng.random_range(2..4usize);
        let p = rng.random_range(2..4usize);
        let (mut c, alpha) = random_parts(seed + 100, q, p);
        c[0] = 1.0;
        let op = InvarianceOperator::from_parts(c, alpha).unwrap();
        let d = op.null_dim();
        assert!(d <= 6);
        let pi = ScalingMatrix::new(common::random_spd(seed, p, 0.3)).unwrap();
        let best = support_objective(&op, &pi, &vec![1.0; d], 2.0).unwrap();
        assert_relative_eq!(best, op.weighted_trace(&pi).unwrap() / 2.0, max_relative = 1e-12);
        for _ in 0..200 {
            let dv: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..=1.0)).collect();
            assert!(support_objective(&op, &pi, &dv, 2.0).unwrap() >= best * (1.0 - 1e-12));
        }
    }
}

#[test]
fn loose_solution_is_refused() {
    let data = common::random_binary_dataset(4, 12, 2);
    let mut sol = train_svm(&data, &SvmConfig::default()).unwrap();
    sol.kkt_residual = 1e-3;
    assert!(matches!(build_invariance_operator(&sol, &data), Err(Error::Domain(_))));
}

#[test]
fn release_is_deterministic() {
    let data = common::random_binary_dataset(6, 15, 3);
    let sol = train_svm(&data, &SvmConfig::default()).unwrap();
    let (a, _) = correlated_obfuscate(&data, &sol, 10.0, RandomStream::new(1, 1)).unwrap();
    let (b, _) = correlated_obfuscate(&data, &sol, 10.0, RandomStream::new(1, 1)).unwrap();
    let (c, _) = correlated_obfuscate(&data, &sol, 10.0, RandomStream::new(2, 1)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_psi_orthonormal_and_annihilated(
        c in prop::collection::vec(-3.0f64..3.0, 2..7),
        alpha in prop::collection::vec(-3.0f64..3.0, 2..5),
    ) {
        let c = DVector::from_vec(c);
        let alpha = DVector::from_vec(alpha);
        let op = InvarianceOperator::from_parts(c.clone(), alpha.clone()).unwrap();
        let psi = op.psi_matrix();
        let d = psi.ncols();
        prop_assert!((psi.transpose() * &psi - DMatrix::<f64>::identity(d, d)).amax() < 1e-10);
        let omega = op.omega_matrix();
        prop_assert!((&omega * &psi).norm() <= 1e-8 * omega.norm().max(1e-300));
        prop_assert_eq!(op.rank() + d, c.len() * alpha.len());
    }
}

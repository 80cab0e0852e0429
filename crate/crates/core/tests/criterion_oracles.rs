//! Finite-difference and dense-operator oracles for the criterion module.

mod common;

use common::*;
use jointdiag::criterion::{
    approx_hessian_dense, gamma, incremental_loss, loss, loss_at, relative_gradient, sum_log_det,
    FullHessian, GammaMatrix,
};
use jointdiag::nalgebra::{DMatrix, SymmetricEigen};
use jointdiag::types::{log_abs_det, transform_with};
use jointdiag::{full_hessian, SymmetricMatrixSet, TransformedSet};
use proptest::prelude::*;

fn loss_of(cset: &SymmetricMatrixSet, b: &DMatrix<f64>) -> f64 {
    loss_at(cset, b).unwrap()
}

/// Central differences of `t -> L((I + t E_ab) B)`.
fn fd_gradient(cset: &SymmetricMatrixSet, b: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let p = b.nrows();
    DMatrix::from_fn(p, p, |a, c| {
        let e = unit(p, a, c);
        let eye = DMatrix::identity(p, p);
        let plus = loss_of(cset, &((&eye + &e * h) * b));
        let minus = loss_of(cset, &((&eye - &e * h) * b));
        (plus - minus) / (2.0 * h)
    })
}

/// Second differences of `(s, t) -> L((I + s E1 + t E2) B)`.
fn fd_hessian_entry(cset: &SymmetricMatrixSet, b: &DMatrix<f64>, e1: &DMatrix<f64>, e2: &DMatrix<f64>, h: f64) -> f64 {
    let p = b.nrows();
    let eye = DMatrix::identity(p, p);
    let at = |s: f64, t: f64| loss_of(cset, &((&eye + e1 * s + e2 * t) * b));
    (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = rng(1);
    let cset = random_spd_set(&mut rng, 10, 5);
    let b = random_b(&mut rng, 5);
    let dset = transform_with(&cset, &b).unwrap();
    let g = relative_gradient(&dset).unwrap().into_matrix();
    let fd = fd_gradient(&cset, &b, 1e-6);
    let rel = max_abs(&(&fd - &g)) / max_abs(&g);
    assert!(rel < 1e-6, "relative error {rel:e}");
}

#[test]
fn hessian_matches_second_differences() {
    let mut rng = rng(2);
    let (n, p) = (5, 4);
    let cset = random_spd_set(&mut rng, n, p);
    let b = random_b(&mut rng, p);
    let h = full_hessian(&transform_with(&cset, &b).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let scale = max_abs(&h.to_dense());
    for ab in 0..p * p {
        for cd in ab..p * p {
            let e1 = unit(p, ab / p, ab % p);
            let e2 = unit(p, cd / p, cd % p);
            let fd = fd_hessian_entry(&cset, &b, &e1, &e2, 1e-4);
            let exact = h.bilinear(&e1, &e2);
            worst = worst.max((fd - exact).abs() / scale);
        }
    }
    assert!(worst < 1e-5, "relative error {worst:e}");
}

#[test]
fn hessian_is_a_symmetric_bilinear_form() {
    let mut rng = rng(3);
    let cset = random_spd_set(&mut rng, 6, 4);
    let b = random_b(&mut rng, 4);
    let h: FullHessian = full_hessian(&transform_with(&cset, &b).unwrap()).unwrap();
    for _ in 0..5 {
        let m1 = normal(&mut rng, 4, 4);
        let m2 = normal(&mut rng, 4, 4);
        assert!((h.bilinear(&m1, &m2) - h.bilinear(&m2, &m1)).abs() < 1e-10);
    }
    for a in 0..4 {
        assert_eq!(h.get(a, a, a, a), 0.0);
    }
}

#[test]
fn exact_and_approximate_hessians_agree_on_diagonal_sets() {
    let mut rng = rng(4);
    let d = TransformedSet::from_matrices(&random_diagonal_set(&mut rng, 7, 4)).unwrap();
    let exact = full_hessian(&d).unwrap().to_dense();
    let approx = approx_hessian_dense(&gamma(&d).unwrap());
    assert!(max_abs(&(exact - approx)) < 1e-14);
}

#[test]
fn apply_matches_dense_contraction() {
    let mut rng = rng(5);
    let p = 4;
    let cset = random_spd_set(&mut rng, 6, p);
    let d = transform_with(&cset, &random_b(&mut rng, p)).unwrap();
    let gm = gamma(&d).unwrap();
    let dense = approx_hessian_dense(&gm);
    let m = normal(&mut rng, p, p);
    let applied = gm.apply(&m).unwrap();
    let flat = DMatrix::from_row_slice(p * p, 1, m.transpose().as_slice());
    let contracted = &dense * flat;
    for a in 0..p {
        for b in 0..p {
            assert!((applied[(a, b)] - contracted[a * p + b]).abs() < 1e-14);
        }
    }
}

/// Dense `p^2 x p^2` approximate Hessian has `p` zero eigenvalues with
/// eigenvectors `E_ii` and is otherwise positive.
fn check_null_space(p: usize, seed: u64) {
    let mut rng = rng(seed);
    let cset = random_spd_set(&mut rng, 10, p);
    let d = transform_with(&cset, &random_b(&mut rng, p)).unwrap();
    let dense = approx_hessian_dense(&gamma(&d).unwrap());
    let eig = SymmetricEigen::new(dense);
    assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
    let null: Vec<usize> = (0..p * p).filter(|&k| eig.eigenvalues[k].abs() < 1e-8).collect();
    assert_eq!(null.len(), p);
    for k in null {
        let v = eig.eigenvectors.column(k);
        let residual: f64 = (0..p * p)
            .filter(|idx| idx / p != idx % p)
            .map(|idx| v[idx] * v[idx])
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-8);
    }
}

#[test]
fn approximate_hessian_eigenstructure() {
    for (p, seed) in [(3, 10), (4, 11), (5, 12)] {
        check_null_space(p, seed);
    }
}

#[test]
fn loss_is_scale_invariant() {
    let mut rng = rng(6);
    let cset = random_spd_set(&mut rng, 8, 5);
    let b = random_b(&mut rng, 5);
    let lambda = DMatrix::from_diagonal(&jointdiag::nalgebra::dvector![2.0, 5.0, 0.3, 7.0, 1.5]);
    let base = loss_of(&cset, &b);
    let scaled = loss_of(&cset, &(&lambda * &b));
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn incremental_and_direct_losses_agree() {
    let mut rng = rng(7);
    let cset = random_spd_set(&mut rng, 10, 5);
    let sum_c = sum_log_det(&cset).unwrap();
    for _ in 0..5 {
        let b = random_b(&mut rng, 5);
        let d = transform_with(&cset, &b).unwrap();
        let direct = loss(&d);
        let inc = incremental_loss(&d, sum_c, log_abs_det(&b));
        assert!((direct - inc).abs() <= 1e-9 * direct.abs(), "{direct} vs {inc}");
    }
}

#[test]
fn tiny_losses_keep_relative_accuracy() {
    // off-diagonal eps: loss = -(1/2) ln(1 - eps^2 / (d1 d2)) ~ eps^2 / (2 d1 d2)
    let eps = 1e-9;
    let d = TransformedSet::from_matrices(&[DMatrix::from_row_slice(2, 2, &[2.0, eps, eps, 3.0])]).unwrap();
    let expected = -0.5 * (-(eps * eps) / 6.0f64).ln_1p();
    assert!((loss(&d) - expected).abs() < 1e-14 * expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_nonnegative_and_gradient_diagonal_zero(seed in any::<u64>(), p in 2usize..6, n in 1usize..8) {
        let mut rng = rng(seed);
        let cset = random_spd_set(&mut rng, n, p);
        let d = transform_with(&cset, &random_b(&mut rng, p)).unwrap();
        prop_assert!(loss(&d) >= -1e-14);
        let g = relative_gradient(&d).unwrap();
        for a in 0..p {
            prop_assert_eq!(g.matrix()[(a, a)], 0.0);
        }
    }

    #[test]
    fn gamma_satisfies_cauchy_schwarz(seed in any::<u64>(), p in 2usize..6, n in 1usize..8) {
        let mut rng = rng(seed);
        let cset = random_spd_set(&mut rng, n, p);
        let d = transform_with(&cset, &random_b(&mut rng, p)).unwrap();
        let gm = gamma(&d).unwrap();
        let g = gm.matrix();
        for a in 0..p {
            prop_assert_eq!(g[(a, a)], 1.0);
            for b in 0..p {
                prop_assert!(g[(a, b)] > 0.0);
                prop_assert!(g[(a, b)] * g[(b, a)] >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn solve_gives_descent_directions(seed in any::<u64>(), p in 2usize..7) {
        let mut rng = rng(seed);
        let cset = random_spd_set(&mut rng, 5, p);
        let d = transform_with(&cset, &random_b(&mut rng, p)).unwrap();
        let gm = gamma(&d).unwrap();
        let g = random_offdiag(&mut rng, p);
        let x = gm.solve(&g).unwrap().x;
        prop_assert!(g.dot(&x) > 0.0);
    }

    #[test]
    fn congruence_composes(seed in any::<u64>(), p in 1usize..6) {
        let mut rng = rng(seed);
        let cset = random_spd_set(&mut rng, 3, p);
        let b1 = random_b(&mut rng, p);
        let b2 = random_b(&mut rng, p);
        let twice = transform_with(&cset, &b1).unwrap().congruence(&b2).unwrap();
        let once = transform_with(&cset, &(&b2 * &b1)).unwrap();
        let scale = once.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in twice.as_slice().iter().zip(once.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
        for i in 0..3 {
            let m = once.matrix(i);
            prop_assert_eq!(m.clone_owned(), m.transpose());
        }
    }

    #[test]
    fn apply_inverts_solve(seed in any::<u64>(), p in 2usize..7) {
        let mut rng = rng(seed);
        let diag = random_diagonal_set(&mut rng, 6, p);
        let gm = gamma(&TransformedSet::from_matrices(&diag).unwrap()).unwrap();
        let g = random_offdiag(&mut rng, p);
        let solved = gm.solve(&g).unwrap();
        prop_assume!(solved.degenerate_blocks == 0);
        let back = gm.apply(&solved.x).unwrap();
        for a in 0..p {
            prop_assert_eq!(solved.x[(a, a)], 0.0);
            prop_assert_eq!(back[(a, a)], 0.0);
            for b in 0..p {
                if a != b {
                    prop_assert!((back[(a, b)] - g[(a, b)]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gamma_from_matrix_round_trip() {
    let gm = GammaMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 1.25, 1.25, 1.0])).unwrap();
    assert_eq!(gm.p(), 2);
    assert!(gm.diagonals().is_empty());
}

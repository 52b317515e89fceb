mod common;

use mfac::linalg::relative_l2;
use mfac::oracle::dense_inverse_direct;
use mfac::synth::{gaussian_gradients, low_rank_gradients, normal_vec, rng};
use mfac::{DynamicSketch, FisherConfig, GradientMatrix, InverseCurvature, StaticSketch};
use proptest::prelude::*;

/// Doolittle LU without pivoting; returns `U` row-major.
fn lu_upper(a: &[f64], n: usize) -> Vec<f64> {
    let mut u = a.to_vec();
    for k in 0..n {
        for i in k + 1..n {
            let l = u[i * n + k] / u[k * n + k];
            for j in k..n {
                u[i * n + j] -= l * u[k * n + j];
            }
        }
    }
    u
}

#[test]
fn d_is_the_lu_upper_factor_minus_n() {
    for (seed, (m, d, lambda)) in [(4, 10, 0.1), (7, 30, 1.0), (12, 8, 0.01)].into_iter().enumerate() {
        let g = gaussian_gradients(m, d, seed as u64).unwrap();
        let s = DynamicSketch::setup(&g, &FisherConfig::new(m, lambda, d).unwrap()).unwrap();
        let mut a: Vec<f64> = s.ggt().iter().map(|x| x / lambda).collect();
        for i in 0..m {
            a[i * m + i] += m as f64;
        }
        let mut u = lu_upper(&a, m);
        for i in 0..m {
            u[i * m + i] -= m as f64;
        }
        let scale = s.d_matrix().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for i in 0..m {
            for j in i..m {
                let diff = (u[i * m + j] - s.d_matrix()[i * m + j]).abs();
                assert!(diff <= 1e-12 * scale, "({i},{j}): {diff:e}");
            }
        }
    }
}

#[test]
fn m_equal_one_base_case() {
    let g = GradientMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
    let s = DynamicSketch::setup(&g, &FisherConfig::new(1, 0.5, 2).unwrap()).unwrap();
    assert_eq!(s.d_matrix(), &[50.0]);
    assert_eq!(s.b_matrix(), &[2.0]);
    assert_eq!(s.ihvp(&[1.0, 1.0]).unwrap(), StaticSketch::from_gradients(&g, s.config()).unwrap().ihvp(&[1.0, 1.0]).unwrap());
}

#[test]
fn slot_order_invariance() {
    let (m, d) = (9, 40);
    let g = low_rank_gradients(m, d, 3, 0.1, 4).unwrap();
    let cfg = FisherConfig::new(m, 0.05, d).unwrap();
    let perm: Vec<usize> = (0..m).rev().collect();
    let a = DynamicSketch::setup(&g, &cfg).unwrap();
    let b = DynamicSketch::setup(&g.permuted_rows(&perm).unwrap(), &cfg).unwrap();
    let x = normal_vec(&mut rng(5), d, 1.0);
    assert!(relative_l2(&a.ihvp(&x).unwrap(), &b.ihvp(&x).unwrap()) <= 1e-9);
    assert_ne!(a.d_matrix(), b.d_matrix());
}

#[test]
fn replacing_with_the_same_gradient_is_a_no_op() {
    let (m, d) = (6, 15);
    let g = gaussian_gradients(m, d, 8).unwrap();
    let cfg = FisherConfig::new(m, 0.3, d).unwrap();
    let mut s = DynamicSketch::setup(&g, &cfg).unwrap();
    let before = s.clone();
    s.replace_gradient(2, g.row(2)).unwrap();
    for (a, b) in [(s.ggt(), before.ggt()), (s.d_matrix(), before.d_matrix()), (s.b_matrix(), before.b_matrix())] {
        assert!(mfac::linalg::max_abs_diff(a, b) <= 1e-12);
    }
}

#[test]
fn partial_window_uses_occupied_count() {
    let (m, d, lambda) = (8, 12, 0.2);
    let g = gaussian_gradients(3, d, 9).unwrap();
    let mut s = DynamicSketch::new(&FisherConfig::new(m, lambda, d).unwrap()).unwrap();
    for row in g.iter_rows() {
        s.push(row).unwrap();
    }
    let x = normal_vec(&mut rng(10), d, 1.0);
    let oracle = dense_inverse_direct(&g, &FisherConfig::new(3, lambda, d).unwrap()).unwrap();
    assert!(relative_l2(&s.ihvp(&x).unwrap(), &oracle.ihvp(&x).unwrap()) <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn replacements_do_not_drift(seed in 0u64..10_000, m in 1usize..12, d in 2usize..40) {
        let cfg = FisherConfig::new(m, 0.05, d).unwrap();
        let mut s = DynamicSketch::setup(&gaussian_gradients(m, d, seed).unwrap(), &cfg).unwrap();
        let mut r = rng(seed + 1);
        for t in 0..10 * m {
            let g = normal_vec(&mut r, d, 1.0 / (d as f64).sqrt());
            s.replace_gradient((t * 7 + seed as usize) % m, &g).unwrap();
        }
        let fresh = DynamicSketch::setup(&s.window().unwrap(), &cfg).unwrap();
        let x = normal_vec(&mut r, d, 1.0);
        prop_assert!(relative_l2(&s.ihvp(&x).unwrap(), &fresh.ihvp(&x).unwrap()) <= 1e-9);
    }

    #[test]
    fn dynamic_matches_static(seed in 0u64..10_000, m in 1usize..16, d in 2usize..64) {
        let g = gaussian_gradients(m, d, seed).unwrap();
        let cfg = FisherConfig::new(m, 0.01, d).unwrap();
        let x = normal_vec(&mut rng(seed), d, 1.0);
        let a = DynamicSketch::setup(&g, &cfg).unwrap().ihvp(&x).unwrap();
        let b = StaticSketch::from_gradients(&g, &cfg).unwrap().ihvp(&x).unwrap();
        prop_assert!(relative_l2(&a, &b) <= 1e-10);
    }

    #[test]
    fn triangular_structure(seed in 0u64..10_000, m in 1usize..10) {
        let lambda = 0.25;
        let g = gaussian_gradients(m, 7, seed).unwrap();
        let s = DynamicSketch::setup(&g, &FisherConfig::new(m, lambda, 7).unwrap()).unwrap();
        for i in 0..m {
            prop_assert_eq!(s.b_matrix()[i * m + i], 1.0 / lambda);
            for j in 0..i {
                prop_assert_eq!(s.d_matrix()[i * m + j], 0.0);
            }
            for j in i + 1..m {
                prop_assert_eq!(s.b_matrix()[i * m + j], 0.0);
            }
        }
    }
}

#[test]
fn element_agrees_with_diag() {
    let g = gaussian_gradients(5, 11, 3).unwrap();
    let s = DynamicSketch::setup(&g, &FisherConfig::new(5, 0.1, 11).unwrap()).unwrap();
    let diag = s.diag();
    for (i, v) in diag.iter().enumerate() {
        assert!((s.element(i, i).unwrap() - v).abs() <= 1e-12 * v.abs());
    }
}

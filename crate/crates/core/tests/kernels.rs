//! Kernel values, partial gradients, the empirical loss and its Wasserstein
//! gradient, checked against hand values and finite differences.

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;

use msdecomp::ensemble::rng_from_seed;
use msdecomp::kernels::{grad_l_all, grad_l_at, kernel_eval, kernel_grad, loss_estimate, KernelSpec};
use msdecomp::DecompError;

fn identity(d: usize) -> KernelSpec {
    KernelSpec::variance_diag(&vec![1.0; d]).unwrap()
}

/// Central difference of a scalar function of one coordinate vector.
fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * (1.0 + x[j].abs());
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(got: &[f64], want: &[f64], rel: f64) {
    let scale = 1.0 + want.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!(err <= rel * scale, "got {got:?}, want {want:?}, err {err}");
}

#[test]
fn elo_value_examples() {
    assert_eq!(kernel_eval(&KernelSpec::Elo, &[2.5], &[2.5]).unwrap(), 0.0);
    assert_relative_eq!(kernel_eval(&KernelSpec::Elo, &[1.0], &[3.0]).unwrap(), 0.0625, epsilon = 1e-15);
}

#[test]
fn variance_value_example() {
    assert_eq!(kernel_eval(&identity(2), &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
}

#[test]
fn elo_rejects_nonpositive_input() {
    assert!(matches!(kernel_eval(&KernelSpec::Elo, &[0.0], &[1.0]), Err(DecompError::Domain(_))));
    assert!(matches!(kernel_grad(&KernelSpec::Elo, &[1.0], &[-2.0]), Err(DecompError::Domain(_))));
}

#[test]
fn elo_gradient_examples() {
    let (g1, g2) = kernel_grad(&KernelSpec::Elo, &[1.0], &[1.0]).unwrap();
    assert_eq!((g1[0], g2[0]), (0.0, 0.0));
    let (g1, _) = kernel_grad(&KernelSpec::Elo, &[1.0], &[3.0]).unwrap();
    assert_relative_eq!(g1[0], -0.09375, epsilon = 1e-15);
}

#[test]
fn variance_gradient_example() {
    let (g1, g2) = kernel_grad(&identity(1), &[0.0], &[2.0]).unwrap();
    assert_eq!((g1[0], g2[0]), (-4.0, 4.0));
}

#[test]
fn loss_estimate_examples() {
    assert_eq!(loss_estimate(&KernelSpec::Elo, &[1.0, 1.0], 1).unwrap(), 0.0);
    assert_relative_eq!(loss_estimate(&KernelSpec::Elo, &[1.0, 3.0], 1).unwrap(), 0.03125, epsilon = 1e-15);
    assert_relative_eq!(loss_estimate(&identity(1), &[0.0, 2.0], 1).unwrap(), 2.0, epsilon = 1e-15);
}

#[test]
fn wasserstein_gradient_examples() {
    assert_relative_eq!(grad_l_at(&identity(1), &[0.0, 2.0], 1, &[0.0]).unwrap()[0], -4.0, epsilon = 1e-15);
    assert_eq!(grad_l_at(&identity(1), &[3.5], 1, &[3.5]).unwrap()[0], 0.0);
    assert_eq!(grad_l_at(&KernelSpec::Elo, &[1.0], 1, &[1.0]).unwrap()[0], 0.0);
}

#[test]
fn variance_gradient_is_four_w_times_offset_from_mean() {
    let k = KernelSpec::variance_diag(&[2.0, -0.5]).unwrap();
    let pts = [1.0, 2.0, -3.0, 0.5, 4.0, -1.0];
    let mean = [(1.0 - 3.0 + 4.0) / 3.0, (2.0 + 0.5 - 1.0) / 3.0];
    let x = [0.3, -0.7];
    let g = grad_l_at(&k, &pts, 2, &x).unwrap();
    assert_relative_eq!(g[0], 4.0 * 2.0 * (x[0] - mean[0]), epsilon = 1e-12);
    assert_relative_eq!(g[1], 4.0 * -0.5 * (x[1] - mean[1]), epsilon = 1e-12);
}

#[test]
fn grad_l_all_matches_pointwise_gradient() {
    let k = identity(2);
    let pts = [1.0, 2.0, -3.0, 0.5, 4.0, -1.0];
    let all = grad_l_all(&k, &pts, 2).unwrap();
    for i in 0..3 {
        let g = grad_l_at(&k, &pts, 2, &pts[2 * i..2 * i + 2]).unwrap();
        assert_close(&all[2 * i..2 * i + 2], &g, 1e-14);
    }
}

#[test]
fn kernel_gradients_match_finite_differences_on_100_points() {
    let mut rng = rng_from_seed(3);
    let var = KernelSpec::variance(vec![vec![1.5, 0.3], vec![0.3, -0.8]]).unwrap();
    for _ in 0..100 {
        let x = [rng.random_range(0.1..50.0)];
        let y = [rng.random_range(0.1..50.0)];
        let (g1, g2) = kernel_grad(&KernelSpec::Elo, &x, &y).unwrap();
        assert_close(&g1, &fd_grad(|a| kernel_eval(&KernelSpec::Elo, a, &y).unwrap(), &x), 1e-6);
        assert_close(&g2, &fd_grad(|b| kernel_eval(&KernelSpec::Elo, &x, b).unwrap(), &y), 1e-6);

        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (g1, g2) = kernel_grad(&var, &x, &y).unwrap();
        assert_close(&g1, &fd_grad(|a| kernel_eval(&var, a, &y).unwrap(), &x), 1e-6);
        assert_close(&g2, &fd_grad(|b| kernel_eval(&var, &x, b).unwrap(), &y), 1e-6);
    }
}

/// ∂L̂/∂x_i = (1/N)·∇L(μ̂)(x_i) for the empirical double sum.
fn check_chain_identity(kern: &KernelSpec, pts: &[f64], dim: usize) {
    let n = pts.len() / dim;
    for i in 0..n {
        let fd = fd_grad(
            |xi| {
                let mut p = pts.to_vec();
                p[i * dim..(i + 1) * dim].copy_from_slice(xi);
                loss_estimate(kern, &p, dim).unwrap()
            },
            &pts[i * dim..(i + 1) * dim],
        );
        let g: Vec<f64> = grad_l_at(kern, pts, dim, &pts[i * dim..(i + 1) * dim])
            .unwrap()
            .into_iter()
            .map(|v| v / n as f64)
            .collect();
        assert_close(&g, &fd, 1e-6);
    }
}

#[test]
fn chain_identity_on_random_five_particle_sets() {
    let mut rng = rng_from_seed(5);
    let var = KernelSpec::variance_diag(&[1.0, -1.0]).unwrap();
    for _ in 0..20 {
        let elo: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..40.0)).collect();
        check_chain_identity(&KernelSpec::Elo, &elo, 1);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-8.0..8.0)).collect();
        check_chain_identity(&var, &v, 2);
    }
}

proptest! {
    #[test]
    fn kernels_are_symmetric(x in 1e-3f64..1e3, y in 1e-3f64..1e3, a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let e1 = kernel_eval(&KernelSpec::Elo, &[x], &[y]).unwrap();
        let e2 = kernel_eval(&KernelSpec::Elo, &[y], &[x]).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-14);
        let k = KernelSpec::variance_diag(&[0.7, -1.3]).unwrap();
        let v1 = kernel_eval(&k, &[x, a], &[y, b]).unwrap();
        let v2 = kernel_eval(&k, &[y, b], &[x, a]).unwrap();
        prop_assert!((v1 - v2).abs() <= 1e-14 * (1.0 + v1.abs()));
    }

    #[test]
    fn elo_loss_is_bounded_by_a_quarter(x in 1e-6f64..1e6, y in 1e-6f64..1e6) {
        let v = kernel_eval(&KernelSpec::Elo, &[x], &[y]).unwrap();
        prop_assert!((0.0..=0.25).contains(&v));
    }

    #[test]
    fn variance_loss_is_twice_weighted_covariance_trace(pts in proptest::collection::vec(-20.0f64..20.0, 2..40)) {
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<f64>() / n;
        let var = pts.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let k = KernelSpec::variance_diag(&[3.0]).unwrap();
        let l = loss_estimate(&k, &pts, 1).unwrap();
        prop_assert!((l - 2.0 * 3.0 * var).abs() <= 1e-9 * (1.0 + l.abs()));
    }
}

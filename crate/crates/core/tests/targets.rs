//! Sampling, log-densities and scores of the target families.

use approx::assert_relative_eq;
use rand::Rng;

use msdecomp::ensemble::rng_from_seed;
use msdecomp::targets::TargetSpec;
use msdecomp::DecompError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn three_lognormals() -> TargetSpec {
    TargetSpec::mixture(vec![
        (0.1, TargetSpec::lognormal(4.8, 0.05).unwrap()),
        (0.6, TargetSpec::lognormal(5.8, 0.05).unwrap()),
        (0.3, TargetSpec::lognormal(7.5, 0.05).unwrap()),
    ])
    .unwrap()
}

fn two_lognormals() -> TargetSpec {
    TargetSpec::mixture(vec![
        (0.3, TargetSpec::lognormal(4.0, 0.1).unwrap()),
        (0.7, TargetSpec::lognormal(4.6, 0.15).unwrap()),
    ])
    .unwrap()
}

fn gaussian_mixture_2d() -> TargetSpec {
    TargetSpec::mixture(vec![
        (1.0 / 3.0, TargetSpec::bivariate([-10.0, 5.0], [6.0, 5.0], -0.7).unwrap()),
        (1.0 / 3.0, TargetSpec::bivariate([0.0, 10.0], [7.0, 5.0], 0.8).unwrap()),
        (1.0 / 3.0, TargetSpec::bivariate([10.0, 15.0], [8.0, 5.0], -0.9).unwrap()),
    ])
    .unwrap()
}

#[test]
fn standard_normal_sample_mean() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    let s = t.sample_seeded(100_000, 1);
    let m = s.iter().sum::<f64>() / s.len() as f64;
    assert!(m.abs() <= 3.0 / (1e5f64).sqrt(), "mean {m}");
}

#[test]
fn bivariate_sample_correlation() {
    let t = TargetSpec::mvnormal(vec![0.0, 0.0], vec![vec![16.0, 14.4], vec![14.4, 36.0]]).unwrap();
    let s = t.sample_seeded(100_000, 2);
    let n = (s.len() / 2) as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in s.chunks(2) {
        mx += p[0] / n;
        my += p[1] / n;
    }
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in s.chunks(2) {
        sxx += (p[0] - mx).powi(2);
        syy += (p[1] - my).powi(2);
        sxy += (p[0] - mx) * (p[1] - my);
    }
    let rho = sxy / (sxx * syy).sqrt();
    assert!((rho - 0.6).abs() <= 0.02, "rho {rho}");
}

#[test]
fn mixed_lognormal_top_mode_mass() {
    let s = three_lognormals().sample_seeded(100_000, 3);
    let top = s.iter().filter(|&&v| v > 1200.0).count() as f64 / s.len() as f64;
    assert!((top - 0.3).abs() <= 0.02, "mass near exp(7.5): {top}");
    // Three separated modes: nothing between the peaks at e^4.8 and e^5.8,
    // nor between e^5.8 and e^7.5.
    assert!(s.iter().all(|&v| !(170.0..230.0).contains(&v)));
    assert!(s.iter().all(|&v| !(600.0..1200.0).contains(&v)));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let t = gaussian_mixture_2d();
    assert_eq!(t.sample_seeded(500, 9), t.sample_seeded(500, 9));
    assert_ne!(t.sample_seeded(500, 9), t.sample_seeded(500, 10));
}

#[test]
fn log_density_examples() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    assert_relative_eq!(t.log_density(&[0.0]), -0.5 * LN_2PI, epsilon = 1e-15);
    let ln = TargetSpec::lognormal(4.0, 0.5).unwrap();
    assert_relative_eq!(
        ln.log_density(&[4f64.exp()]),
        -4.0 - 0.5 * (std::f64::consts::PI / 2.0).ln(),
        epsilon = 1e-13
    );
    let single = TargetSpec::bivariate([1.0, 2.0], [3.0, 4.0], 0.2).unwrap();
    let doubled = TargetSpec::mixture(vec![(0.5, single.clone()), (0.5, single.clone())]).unwrap();
    for x in [[0.0, 0.0], [1.0, -3.0], [7.0, 2.5]] {
        assert_relative_eq!(doubled.log_density(&x), single.log_density(&x), epsilon = 1e-13);
    }
}

#[test]
fn lognormal_outside_support() {
    let ln = TargetSpec::lognormal(4.0, 0.5).unwrap();
    assert_eq!(ln.log_density(&[0.0]), f64::NEG_INFINITY);
    assert_eq!(ln.log_density(&[-1.0]), f64::NEG_INFINITY);
    assert!(matches!(ln.score(&[0.0]), Err(DecompError::Domain(_))));
}

#[test]
fn score_examples() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    assert_eq!(t.score(&[1.0]).unwrap(), vec![-1.0]);
    let ln = TargetSpec::lognormal(4.0, 0.5).unwrap();
    assert_relative_eq!(ln.score(&[4f64.exp()]).unwrap()[0], -1.0 / 4f64.exp(), epsilon = 1e-15);
}

#[test]
fn mvnormal_score_is_minus_precision_times_offset() {
    let t = TargetSpec::mvnormal(vec![1.0, -2.0], vec![vec![16.0, 14.4], vec![14.4, 36.0]]).unwrap();
    let TargetSpec::Mvnormal(m) = &t else { unreachable!() };
    let p = m.precision();
    let x = [3.0, 0.5];
    let s = t.score(&x).unwrap();
    let want = [
        -(p[0][0] * (x[0] - 1.0) + p[0][1] * (x[1] + 2.0)),
        -(p[1][0] * (x[0] - 1.0) + p[1][1] * (x[1] + 2.0)),
    ];
    assert_relative_eq!(s[0], want[0], epsilon = 1e-14);
    assert_relative_eq!(s[1], want[1], epsilon = 1e-14);
}

fn fd_score(t: &TargetSpec, x: &[f64]) -> Vec<f64> {
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + xn);
    (0..x.len())
        .map(|j| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (t.log_density(&a) - t.log_density(&b)) / (2.0 * h)
        })
        .collect()
}

fn check_score(t: &TargetSpec, points: &[Vec<f64>]) {
    for x in points {
        let s = t.score(x).unwrap();
        let fd = fd_score(t, x);
        let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = s.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err <= 1e-5 * (1.0 + sn), "x {x:?}: score {s:?} vs fd {fd:?}");
    }
}

#[test]
fn scores_match_finite_differences_for_every_family() {
    let mut rng = rng_from_seed(17);
    let mut draw = |lo: f64, hi: f64, d: usize| -> Vec<Vec<f64>> {
        (0..100).map(|_| (0..d).map(|_| rng.random_range(lo..hi)).collect()).collect()
    };
    check_score(&TargetSpec::gaussian1d(2.0, 3.0).unwrap(), &draw(-8.0, 12.0, 1));
    check_score(
        &TargetSpec::mvnormal(vec![0.0, 0.0], vec![vec![16.0, 14.4], vec![14.4, 36.0]]).unwrap(),
        &draw(-15.0, 15.0, 2),
    );
    check_score(&TargetSpec::lognormal(4.0, 0.5).unwrap(), &draw(5.0, 300.0, 1));
    check_score(&two_lognormals(), &draw(30.0, 200.0, 1));
    check_score(&three_lognormals(), &draw(100.0, 2200.0, 1));
    check_score(&gaussian_mixture_2d(), &draw(-25.0, 30.0, 2));
    check_score(&TargetSpec::smoothed_uniform(10.0, 30.0, None).unwrap(), &draw(5.0, 35.0, 1));
}

#[test]
fn smoothed_uniform_integrates_to_one() {
    let t = TargetSpec::smoothed_uniform(10.0, 30.0, None).unwrap();
    let (lo, hi, m) = (0.0, 40.0, 400_000);
    let h = (hi - lo) / m as f64;
    let total: f64 = (0..m).map(|i| t.log_density(&[lo + (i as f64 + 0.5) * h]).exp() * h).sum();
    assert!((total - 1.0).abs() <= 1e-4, "integral {total}");
    assert!(t.score(&[20.0]).unwrap()[0].abs() < 1e-6);
    assert!(t.score(&[10.5]).unwrap()[0] > 0.0);
    assert!(t.score(&[29.5]).unwrap()[0] < 0.0);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(TargetSpec::gaussian1d(0.0, 0.0), Err(DecompError::Config(_))));
    assert!(matches!(TargetSpec::lognormal(1.0, -0.1), Err(DecompError::Config(_))));
    assert!(matches!(TargetSpec::smoothed_uniform(3.0, 3.0, None), Err(DecompError::Config(_))));
    assert!(matches!(
        TargetSpec::mvnormal(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
        Err(DecompError::Config(_))
    ));
    assert!(matches!(
        TargetSpec::mixture(vec![(0.5, TargetSpec::gaussian1d(0.0, 1.0).unwrap())]),
        Err(DecompError::Config(_))
    ));
}

//! The Wasserstein flows: projection, λ, velocities, steps and run records.

use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use msdecomp::density::{estimator_correction, evaluate_pooled, KdeConfig};
use msdecomp::ensemble::{
    init_from_target, DecompositionState, ParticleSet, WeightInit, WeightVector,
};
use msdecomp::kernels::{grad_l_all, loss_estimate, CoupledKernel, KernelSpec};
use msdecomp::targets::TargetSpec;
use msdecomp::wflow::{
    evaluate, floor_and_renormalize, project_simplex_tangent, run_dynamic, run_fixed, run_from_state, step_dynamic,
    step_fixed, velocity_dynamic, velocity_fixed, FlowConfig, FlowMode, PositivityGuard, ScoreEstimator,
    VelocityField,
};
use msdecomp::Result;

fn state(dim: usize, groups: Vec<Vec<f64>>, p: Vec<f64>) -> DecompositionState {
    DecompositionState::new(ParticleSet::new(dim, groups).unwrap(), WeightVector::new(p, 1e-3).unwrap(), 0).unwrap()
}

/// ℓ ≡ 0: isolates the constraint part of the flow.
struct ZeroKernel;

impl CoupledKernel for ZeroKernel {
    fn eval(&self, _: &[f64], _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn grad(&self, x: &[f64], _: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((vec![0.0; x.len()], vec![0.0; x.len()]))
    }
}

fn var1() -> KernelSpec {
    KernelSpec::variance_diag(&[1.0]).unwrap()
}

#[test]
fn projection_examples() {
    assert_eq!(project_simplex_tangent(&[1.0, 1.0]), vec![0.0, 0.0]);
    assert_eq!(project_simplex_tangent(&[1.0, 0.0]), vec![0.5, -0.5]);
}

#[test]
fn step_fixed_examples() {
    let s = state(1, vec![vec![1.0]], vec![1.0]);
    let zero = VelocityField { phi: vec![vec![0.0]], lambda: 0.0, weight_velocity: vec![0.0] };
    assert_eq!(step_fixed(&s, &zero, 0.1, PositivityGuard::None).unwrap().particles, s.particles);
    let v = VelocityField { phi: vec![vec![-0.5]], lambda: 0.0, weight_velocity: vec![0.0] };
    let next = step_fixed(&s, &v, 0.1, PositivityGuard::None).unwrap();
    assert_relative_eq!(next.particles.group(0)[0], 0.95, epsilon = 1e-15);
    assert_eq!(next.iteration, 1);
    assert_eq!(next.weights, s.weights);
}

#[test]
fn reflect_guard_example() {
    let s = state(1, vec![vec![0.1]], vec![1.0]);
    let v = VelocityField { phi: vec![vec![-3.0]], lambda: 0.0, weight_velocity: vec![0.0] };
    let next = step_fixed(&s, &v, 0.1, PositivityGuard::Reflect).unwrap();
    assert_relative_eq!(next.particles.group(0)[0], 0.2, epsilon = 1e-15);
    let log = step_fixed(&s, &v, 0.1, PositivityGuard::LogDomain).unwrap();
    assert_relative_eq!(log.particles.group(0)[0], 0.1 * (-3.0f64).exp(), epsilon = 1e-15);
}

#[test]
fn step_dynamic_examples() {
    let s = state(1, vec![vec![1.0], vec![2.0]], vec![0.5, 0.5]);
    let still = VelocityField { phi: vec![vec![0.0], vec![0.0]], lambda: 0.0, weight_velocity: vec![0.0, 0.0] };
    assert_eq!(step_dynamic(&s, &still, 0.1, 0.1, 1e-3, PositivityGuard::None).unwrap().weights, s.weights);
    let v = VelocityField { phi: vec![vec![0.0], vec![0.0]], lambda: 0.0, weight_velocity: vec![0.1, -0.1] };
    let next = step_dynamic(&s, &v, 0.1, 0.1, 1e-3, PositivityGuard::None).unwrap();
    assert_relative_eq!(next.weights.as_slice()[0], 0.51, epsilon = 1e-15);
    assert_relative_eq!(next.weights.as_slice()[1], 0.49, epsilon = 1e-15);

    let s = state(1, vec![vec![1.0], vec![2.0]], vec![0.0011, 0.9989]);
    let v = VelocityField { phi: vec![vec![0.0], vec![0.0]], lambda: 0.0, weight_velocity: vec![-0.5, 0.5] };
    let next = step_dynamic(&s, &v, 0.1, 0.01, 1e-3, PositivityGuard::None).unwrap();
    assert_relative_eq!(next.weights.as_slice()[0], 1e-3, epsilon = 1e-12);
    assert_relative_eq!(next.weights.as_slice()[1], 1.0 - 1e-3, epsilon = 1e-12);
}

#[test]
fn floor_redistributes_the_deficit_proportionally() {
    let p = floor_and_renormalize(&[-0.2, 0.3, 0.9], 0.01);
    assert_relative_eq!(p[0], 0.01, epsilon = 1e-15);
    assert_relative_eq!(p[1] / p[2], 0.3 / 0.9, epsilon = 1e-12);
    assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
}

#[test]
fn matched_single_kernel_state_is_a_fixed_point() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    let cfg = FlowConfig { kde: KdeConfig::fixed(1.0), ..FlowConfig::default() };
    for groups in [vec![vec![0.0]], vec![vec![0.0], vec![0.0]]] {
        let k = groups.len();
        let s = state(1, groups, vec![1.0 / k as f64; k]);
        let v = velocity_fixed(&s, &var1(), &t, &cfg).unwrap();
        assert_eq!(v.lambda, 0.0);
        assert!(v.phi.iter().flatten().all(|&x| x == 0.0));
    }
}

/// Every term of the fixed-weight velocity assembled by hand for three
/// particles, h = 1, π = N(0,1), ℓ ≡ 0.
#[test]
fn hand_assembled_three_particle_velocity() {
    let xs = [0.9, 1.0, 1.3];
    let alpha = 0.7;
    let gauss = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut kl = 0.0;
    let mut diff = [0.0; 3];
    for (i, &x) in xs.iter().enumerate() {
        let dens: f64 = xs.iter().map(|&z| gauss(x - z)).sum::<f64>() / 3.0;
        let num: f64 = xs.iter().map(|&z| gauss(x - z) * (z - x)).sum::<f64>() / 3.0;
        let s_mu = num / dens;
        let s_pi = -x;
        diff[i] = s_mu - s_pi;
        kl += (dens.ln() - gauss(x).ln()) / 3.0;
    }
    assert!(kl > 0.0);
    let den: f64 = diff.iter().map(|d| d * d).sum::<f64>() / 3.0;
    let lambda = alpha * kl / den;

    let s = state(1, vec![xs.to_vec()], vec![1.0]);
    let cfg = FlowConfig { alpha, kde: KdeConfig::fixed(1.0), score: ScoreEstimator::Kde, ..FlowConfig::default() };
    let kern = KernelSpec::Custom(Arc::new(ZeroKernel));
    let v = velocity_fixed(&s, &kern, &TargetSpec::gaussian1d(0.0, 1.0).unwrap(), &cfg).unwrap();
    assert_relative_eq!(v.lambda, lambda, epsilon = 1e-13);
    for i in 0..3 {
        assert_relative_eq!(v.phi[0][i], -lambda * diff[i], epsilon = 1e-13);
    }
}

fn sample_state(seed: u64, p: Vec<f64>) -> (TargetSpec, DecompositionState) {
    let t = TargetSpec::bivariate([0.0, 0.0], [4.0, 6.0], 0.6).unwrap();
    let k = p.len();
    let s = init_from_target(&t, k, 25, seed, &WeightInit::Explicit(p)).unwrap();
    // Perturb the groups apart so the constraint is active.
    let groups = s
        .particles
        .groups()
        .iter()
        .enumerate()
        .map(|(k, g)| g.iter().map(|v| v * (1.0 + 0.2 * k as f64) + k as f64).collect())
        .collect();
    (t, DecompositionState { particles: ParticleSet::new(2, groups).unwrap(), ..s })
}

#[test]
fn lambda_is_affine_in_alpha_in_both_modes() {
    let (t, s) = sample_state(3, vec![0.3, 0.7]);
    let kern = KernelSpec::variance_diag(&[1.0, 1.0]).unwrap();
    for mode in [FlowMode::FixedWeights, FlowMode::DynamicWeights] {
        let base = FlowConfig { kde: KdeConfig::fixed(1.5), theta: 0.5, eta: 0.01, eta2: 0.004, ..FlowConfig::default() };
        let at = |alpha: f64| evaluate(&s, &kern, &t, &FlowConfig { alpha, ..base.clone() }, mode).unwrap();
        let e0 = at(1e-300);
        let e1 = at(2.5);
        assert!(e1.kl > 0.0);
        let slope = e1.kl / e1.lambda_denominator;
        assert!(((e1.velocity.lambda - e0.velocity.lambda) - 2.5 * slope).abs() <= 1e-12 * (1.0 + e1.velocity.lambda.abs()));
        let e2 = at(5.0);
        assert!(((e2.velocity.lambda - e0.velocity.lambda) - 2.0 * (e1.velocity.lambda - e0.velocity.lambda)).abs() <= 1e-12);
    }
}

#[test]
fn velocity_decomposes_along_the_constraint_direction() {
    let (t, s) = sample_state(4, vec![0.4, 0.6]);
    let kern = KernelSpec::variance_diag(&[1.0, -0.5]).unwrap();
    let cfg = FlowConfig { kde: KdeConfig::fixed(1.5), ..FlowConfig::default() };
    let v = velocity_fixed(&s, &kern, &t, &cfg).unwrap();
    let eval = evaluate_pooled(&s, &t, &cfg.kde).unwrap();
    let corr = estimator_correction(&s, &eval);
    let n = s.particles.n();
    for k in 0..2 {
        let p = s.weights.as_slice()[k];
        let gl = grad_l_all(&kern, s.particles.group(k), 2).unwrap();
        for j in 0..n * 2 {
            let idx = k * n * 2 + j;
            let g = eval.kde_score[idx] - eval.target_score[idx] + corr[idx];
            let residual = v.phi[k][j] + p * gl[j];
            assert!((residual + v.lambda * p * g).abs() <= 1e-10 * (1.0 + residual.abs()));
        }
    }
}

#[test]
fn symmetric_state_has_zero_weight_velocity() {
    let t = TargetSpec::gaussian1d(0.0, 2.0).unwrap();
    let g = vec![-2.0, -0.5, 0.3, 1.7, 2.2];
    let s = state(1, vec![g.clone(), g.clone(), g], vec![1.0 / 3.0; 3]);
    for theta in [1e-4, 1e3] {
        let cfg = FlowConfig { kde: KdeConfig::fixed(0.8), theta, ..FlowConfig::default() };
        let v = velocity_dynamic(&s, &var1(), &t, &cfg).unwrap();
        assert!(v.weight_velocity.iter().all(|x| x.abs() < 1e-12), "{:?}", v.weight_velocity);
    }
}

/// v = −P(∇_pF + λ∇_pKL) with ∇_pF_k = L̂_k − θβ/p_k^{β+1}, assembled from
/// the library's own pieces.
#[test]
fn weight_velocity_formula_chain() {
    let raw = [0.1 - 4.0, 0.3 - 4.0];
    let v: Vec<f64> = project_simplex_tangent(&raw).into_iter().map(|x| -x).collect();
    assert_relative_eq!(v[0], 0.1, epsilon = 1e-15);
    assert_relative_eq!(v[1], -0.1, epsilon = 1e-15);

    let (t, s) = sample_state(6, vec![0.5, 0.5]);
    let kern = KernelSpec::variance_diag(&[1.0, 1.0]).unwrap();
    let cfg = FlowConfig { kde: KdeConfig::fixed(1.5), theta: 1.0, beta: 1.0, ..FlowConfig::default() };
    let vel = velocity_dynamic(&s, &kern, &t, &cfg).unwrap();
    let gkl = msdecomp::density::kl_grad_weights(&s, &t, &cfg.kde).unwrap();
    let raw: Vec<f64> = (0..2)
        .map(|k| {
            let l = loss_estimate(&kern, s.particles.group(k), 2).unwrap();
            l - 1.0 / (0.5f64 * 0.5) + vel.lambda * gkl[k]
        })
        .collect();
    let want: Vec<f64> = project_simplex_tangent(&raw).into_iter().map(|x| -x).collect();
    assert_relative_eq!(vel.weight_velocity[0], want[0], epsilon = 1e-10);
    assert_relative_eq!(vel.weight_velocity[1], want[1], epsilon = 1e-10);
}

#[test]
fn zero_iterations_record_the_initial_state() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    let cfg = FlowConfig { iterations: 0, kde: KdeConfig::fixed(0.5), ..FlowConfig::default() };
    let rec = run_fixed(&t, &var1(), 2, 20, &WeightInit::Equal, &cfg, 1).unwrap();
    assert_eq!(rec.len(), 1);
    assert_eq!(rec.final_state.iteration, 0);
    assert_eq!(rec.snapshots.len(), 1);
}

#[test]
fn runs_are_reproducible_and_series_have_t_plus_one_entries() {
    let t = TargetSpec::bivariate([0.0, 0.0], [4.0, 6.0], 0.6).unwrap();
    let kern = KernelSpec::variance_diag(&[1.0, 1.0]).unwrap();
    let cfg = FlowConfig { iterations: 15, eta: 0.01, kde: KdeConfig::fixed(1.2), snapshot_every: 5, ..FlowConfig::default() };
    let a = run_fixed(&t, &kern, 2, 40, &WeightInit::Equal, &cfg, 7).unwrap();
    let b = run_fixed(&t, &kern, 2, 40, &WeightInit::Equal, &cfg, 7).unwrap();
    assert_eq!(a.trace_csv(), b.trace_csv());
    assert!(a.failure.is_none());
    for len in [a.kl.len(), a.objective.len(), a.lambda.len(), a.phi_norm.len(), a.weights.len(), a.bandwidth.len()] {
        assert_eq!(len, 16);
    }
    assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 5, 10, 15]);
    assert_eq!(a.trace_csv().lines().next().unwrap(), "t,kl,objective,lambda,phi_norm,bandwidth,p_1,p_2");
}

#[test]
fn single_group_dynamic_run_keeps_unit_weight() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    let cfg = FlowConfig { iterations: 10, theta: 1.0, kde: KdeConfig::fixed(0.5), ..FlowConfig::default() };
    let rec = run_dynamic(&t, &var1(), 1, 20, &cfg, 2).unwrap();
    assert!(rec.weights.iter().all(|w| w == &vec![1.0]));
}

#[test]
fn dynamic_weights_stay_on_the_floored_simplex() {
    let t = TargetSpec::mixture(vec![
        (0.3, TargetSpec::lognormal(4.0, 0.1).unwrap()),
        (0.7, TargetSpec::lognormal(4.6, 0.15).unwrap()),
    ])
    .unwrap();
    let cfg = FlowConfig {
        iterations: 60,
        alpha: 8e-5,
        eta: 250.0,
        eta2: 2.0,
        theta: 1e-4,
        kde: KdeConfig::fixed(3.0),
        ..FlowConfig::default()
    };
    let rec = run_dynamic(&t, &KernelSpec::Elo, 3, 30, &cfg, 9).unwrap();
    assert!(rec.failure.is_none());
    for w in &rec.weights {
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w.iter().all(|&p| p >= cfg.p_floor));
    }
    assert!(rec.final_state.particles.all_coords().iter().all(|&x| x > 0.0));
}

#[test]
fn numerical_failures_truncate_the_record() {
    let t = TargetSpec::lognormal(1.0, 0.5).unwrap();
    let s = state(1, vec![vec![1.0, 2.0, 3.0]], vec![1.0]);
    let cfg = FlowConfig {
        iterations: 5,
        kde: KdeConfig::fixed(0.5),
        positivity_guard: PositivityGuard::None,
        ..FlowConfig::default()
    };
    // The variance kernel with a huge step pushes particles below zero.
    let rec = run_from_state(s, &var1(), &t, &FlowConfig { eta: 10.0, ..cfg }).unwrap();
    let fail = rec.failure.clone().expect("the run should stop");
    assert!(fail.iteration >= 1);
    assert_eq!(rec.len(), fail.iteration);
}

#[test]
fn invalid_flow_configs_are_rejected() {
    for cfg in [
        FlowConfig { alpha: 0.0, ..FlowConfig::default() },
        FlowConfig { eta: -1.0, ..FlowConfig::default() },
        FlowConfig { mode: FlowMode::DynamicWeights, theta: 0.0, ..FlowConfig::default() },
        FlowConfig { p_floor: 1.0, ..FlowConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_is_idempotent_and_sums_to_zero(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
        let p = project_simplex_tangent(&v);
        prop_assert!(p.iter().sum::<f64>().abs() <= 1e-12);
        let pp = project_simplex_tangent(&p);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()) + 1e-15);
        }
    }

    #[test]
    fn weight_velocity_sums_to_zero(seed in 0u64..500, p1 in 0.1f64..0.45, theta in 1e-4f64..2.0) {
        let (t, s) = sample_state(seed, vec![p1, 0.5, 0.5 - p1]);
        let kern = KernelSpec::variance_diag(&[1.0, 1.0]).unwrap();
        let cfg = FlowConfig { kde: KdeConfig::fixed(1.5), theta, ..FlowConfig::default() };
        let v = velocity_dynamic(&s, &kern, &t, &cfg).unwrap();
        // θ/p² reaches ~1e4 for small weights, so round-off scales with the largest entry.
        let scale = v.weight_velocity.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!(v.weight_velocity.iter().sum::<f64>().abs() <= 1e-13 * scale);
    }

    #[test]
    fn floor_and_renormalize_lands_on_the_floored_simplex(raw in proptest::collection::vec(-0.5f64..1.5, 2..6)) {
        let floor = 1e-3;
        let p = floor_and_renormalize(&raw, floor);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x >= floor - 1e-15));
    }
}

//! Initialization, weights, pooling and snapshot round trips.

use proptest::prelude::*;

use msdecomp::ensemble::{
    init_from_target, init_state, pooled_samples, read_snapshot, write_snapshot, DecompositionState, ParticleInit,
    ParticleSet, WeightInit, WeightVector, DEFAULT_P_FLOOR,
};
use msdecomp::targets::TargetSpec;
use msdecomp::DecompError;

fn bivariate() -> TargetSpec {
    TargetSpec::bivariate([0.0, 0.0], [4.0, 6.0], 0.6).unwrap()
}

#[test]
fn two_groups_of_two_hundred() {
    let s = init_from_target(&bivariate(), 2, 200, 7, &WeightInit::Equal).unwrap();
    assert_eq!((s.particles.k(), s.particles.n(), s.particles.dim()), (2, 200, 2));
    assert_eq!(s.weights.as_slice(), &[0.5, 0.5]);
    assert_eq!(s.iteration, 0);
    assert_eq!(s.rng_seed, 7);
}

#[test]
fn degenerate_single_particle() {
    let s = init_from_target(&TargetSpec::gaussian1d(0.0, 1.0).unwrap(), 1, 1, 0, &WeightInit::Equal).unwrap();
    assert_eq!(s.weights.as_slice(), &[1.0]);
    assert_eq!(s.particles.group(0).len(), 1);
}

#[test]
fn same_seed_gives_identical_bits() {
    let a = init_from_target(&bivariate(), 3, 50, 42, &WeightInit::Equal).unwrap();
    let b = init_from_target(&bivariate(), 3, 50, 42, &WeightInit::Equal).unwrap();
    let bits = |s: &DecompositionState| s.particles.all_coords().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = init_from_target(&bivariate(), 3, 50, 43, &WeightInit::Equal).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn groups_are_distinct_draws() {
    let s = init_from_target(&bivariate(), 2, 20, 1, &WeightInit::Equal).unwrap();
    assert_ne!(s.particles.group(0), s.particles.group(1));
}

#[test]
fn invalid_initializations_are_config_errors() {
    let t = bivariate();
    assert!(matches!(init_from_target(&t, 0, 5, 0, &WeightInit::Equal), Err(DecompError::Config(_))));
    assert!(matches!(init_from_target(&t, 2, 0, 0, &WeightInit::Equal), Err(DecompError::Config(_))));
    assert!(matches!(
        init_from_target(&t, 2, 5, 0, &WeightInit::Explicit(vec![0.3, 0.3])),
        Err(DecompError::Config(_))
    ));
    assert!(matches!(
        init_from_target(&t, 2, 5, 0, &WeightInit::Explicit(vec![1.0])),
        Err(DecompError::Config(_))
    ));
    assert!(matches!(
        init_from_target(&t, 2, 5, 0, &WeightInit::Explicit(vec![1.0, 0.0])),
        Err(DecompError::Config(_))
    ));
}

#[test]
fn offset_initialization_in_log_scale_stays_positive() {
    let t = TargetSpec::lognormal(4.0, 0.5).unwrap();
    let init = ParticleInit::Offset { centers: vec![vec![3.5], vec![4.5]], scales: vec![0.3, 0.3], log_scale: true };
    let s = init_state(&t, 2, 100, 3, &WeightInit::Equal, &init, DEFAULT_P_FLOOR).unwrap();
    assert!(s.particles.all_coords().iter().all(|&v| v > 0.0));
    let mean = |k: usize| s.particles.group(k).iter().map(|v| v.ln()).sum::<f64>() / 100.0;
    assert!((mean(0) - 3.5).abs() < 0.1 && (mean(1) - 4.5).abs() < 0.1);
}

#[test]
fn pooled_examples() {
    let t = TargetSpec::gaussian1d(0.0, 1.0).unwrap();
    let s = init_from_target(&t, 2, 2, 0, &WeightInit::Equal).unwrap();
    assert_eq!(pooled_samples(&s).weights, vec![0.25; 4]);
    let s = init_from_target(&t, 2, 1, 0, &WeightInit::Explicit(vec![0.3, 0.7])).unwrap();
    assert_eq!(pooled_samples(&s).weights, vec![0.3, 0.7]);
}

#[test]
fn particle_set_rejects_ragged_and_non_finite_groups() {
    assert!(matches!(ParticleSet::new(2, vec![vec![1.0, 2.0], vec![1.0]]), Err(DecompError::Config(_))));
    assert!(matches!(ParticleSet::new(1, vec![]), Err(DecompError::Config(_))));
    assert!(matches!(ParticleSet::new(1, vec![vec![f64::NAN]]), Err(DecompError::Numerical(_))));
}

#[test]
fn weight_vector_enforces_floor_and_sum() {
    assert!(WeightVector::new(vec![0.5, 0.5], 1e-3).is_ok());
    assert!(WeightVector::new(vec![0.0005, 0.9995], 1e-3).is_err());
    assert!(WeightVector::new(vec![0.6, 0.6], 1e-3).is_err());
    assert!(WeightVector::new(vec![], 1e-3).is_err());
}

#[test]
fn snapshot_round_trip() {
    let s = init_from_target(&bivariate(), 3, 7, 9, &WeightInit::Equal).unwrap();
    let mut buf = Vec::new();
    write_snapshot(&mut buf, 120, &s.particles).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("t,k,i,x1,x2\n"));
    assert_eq!(text.lines().count(), 1 + 21);
    let (t, ps) = read_snapshot(buf.as_slice()).unwrap();
    assert_eq!(t, 120);
    assert_eq!(ps, s.particles);
}

#[test]
fn malformed_snapshots_are_parse_errors() {
    assert!(matches!(read_snapshot("a,b\n1,2\n".as_bytes()), Err(DecompError::Parse(_))));
    assert!(matches!(read_snapshot("t,k,i,x1\n".as_bytes()), Err(DecompError::Parse(_))));
    assert!(matches!(read_snapshot("t,k,i,x1\n0,0,0,1.0\n0,1,1,2.0\n".as_bytes()), Err(DecompError::Parse(_))));
    assert!(matches!(read_snapshot("t,k,i,x1\n0,0,0,abc\n".as_bytes()), Err(DecompError::Parse(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn initialization_is_pure_and_well_formed(seed in any::<u64>(), k in 1usize..5, n in 1usize..30) {
        let t = bivariate();
        let a = init_from_target(&t, k, n, seed, &WeightInit::Equal).unwrap();
        let b = init_from_target(&t, k, n, seed, &WeightInit::Equal).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((a.weights.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(a.particles.all_coords().iter().all(|v| v.is_finite()));
        let pooled = pooled_samples(&a);
        let total: f64 = pooled.weights.iter().sum();
        prop_assert!((total - a.weights.as_slice().iter().sum::<f64>()).abs() <= 1e-12);
    }
}

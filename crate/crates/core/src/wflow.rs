//! Wasserstein constraint-controlled gradient flow on particles, with fixed
//! or dynamic weights.
//!
//! One iteration freezes the state, evaluates the pooled KDE and target at
//! every particle, reduces the scalar multiplier λ, and then moves every
//! particle (and, in dynamic mode, the weights) at once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{estimator_correction, evaluate_pooled, kl_grad_weights_from, KdeConfig};
use crate::ensemble::{
    init_state, write_snapshot, DecompositionState, ParticleInit, ParticleSet, WeightInit, WeightVector,
    RNG_NAME,
};
use crate::error::{config, DecompError, Result};
use crate::kernels::{grad_l_all, loss_estimate, KernelSpec};
use crate::targets::TargetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    #[default]
    FixedWeights,
    DynamicWeights,
}

/// How particles are kept on the positive half-line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositivityGuard {
    /// `reflect` for the Elo kernel or a positive target, `none` otherwise.
    #[default]
    Auto,
    None,
    /// A proposed nonpositive coordinate is replaced by its absolute value
    /// (half the old coordinate if the proposal is exactly 0).
    Reflect,
    /// Integrates y = ln x: x' = x·exp(η φ / x).
    LogDomain,
}

impl PositivityGuard {
    pub fn resolve(self, kern: &KernelSpec, target: &TargetSpec) -> PositivityGuard {
        match self {
            PositivityGuard::Auto if matches!(kern, KernelSpec::Elo) || target.is_positive() => {
                PositivityGuard::Reflect
            }
            PositivityGuard::Auto => PositivityGuard::None,
            other => other,
        }
    }
}

/// Which per-particle direction represents the KL gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreEstimator {
    /// s_μ̂ − s_π, the plug-in form of the Wasserstein gradient of KL.
    Kde,
    /// The exact particle gradient of the KL estimator itself:
    /// s_μ̂ − s_π plus the leave-in correction of the KDE. The estimator
    /// then decays at the controlled rate α instead of overshooting it.
    #[default]
    EstimatorGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub eta: f64,
    pub eta2: f64,
    pub iterations: usize,
    pub mode: FlowMode,
    pub theta: f64,
    pub beta: f64,
    pub denom_floor: f64,
    pub p_floor: f64,
    pub kde: KdeConfig,
    pub positivity_guard: PositivityGuard,
    pub score: ScoreEstimator,
    /// Keep a particle snapshot every this many iterations (0: final only).
    pub snapshot_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta: 0.01,
            eta2: 0.001,
            iterations: 100,
            mode: FlowMode::FixedWeights,
            theta: 0.0,
            beta: 1.0,
            denom_floor: 1e-10,
            p_floor: crate::ensemble::DEFAULT_P_FLOOR,
            kde: KdeConfig::default(),
            positivity_guard: PositivityGuard::Auto,
            score: ScoreEstimator::EstimatorGradient,
            snapshot_every: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                config(format!("flow.{name} must be positive, got {v}"))
            }
        };
        positive("alpha", self.alpha)?;
        positive("eta", self.eta)?;
        positive("denom_floor", self.denom_floor)?;
        if !(self.p_floor > 0.0 && self.p_floor < 1.0) {
            return config(format!("flow.p_floor must lie in (0, 1), got {}", self.p_floor));
        }
        if self.mode == FlowMode::DynamicWeights {
            positive("eta2", self.eta2)?;
            positive("theta", self.theta)?;
            positive("beta", self.beta)?;
        }
        self.kde.validate()
    }
}

/// Per-particle velocities φ_k(x_k^i), the multiplier and the weight velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    /// One flat row-major array per group.
    pub phi: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Zero in fixed-weight mode; sums to 0 in dynamic mode.
    pub weight_velocity: Vec<f64>,
}

/// A velocity field with the monitors computed along the way.
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub velocity: VelocityField,
    /// Unclamped KL estimate.
    pub kl: f64,
    pub objective: f64,
    /// Σ_k mean_i ‖φ_k‖², plus ‖v‖² in dynamic mode.
    pub phi_norm: f64,
    pub bandwidth: f64,
    /// λ's denominator after flooring; λ(α) − λ(0) = α·max(KL,0)/denominator.
    pub lambda_denominator: f64,
    pub group_losses: Vec<f64>,
}

/// Pv = v − mean(v)·1.
pub fn project_simplex_tangent(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates the flow at `state` in the given mode.
pub fn evaluate(
    state: &DecompositionState,
    kern: &KernelSpec,
    target: &TargetSpec,
    cfg: &FlowConfig,
    mode: FlowMode,
) -> Result<FlowEval> {
    let ps = &state.particles;
    let (k_count, n, d) = (ps.k(), ps.n(), ps.dim());
    let p = state.weights.as_slice();
    kern.validate(Some(d))?;

    let eval = evaluate_pooled(state, target, &cfg.kde)?;
    let mut g: Vec<f64> = eval.kde_score.iter().zip(&eval.target_score).map(|(a, b)| a - b).collect();
    if cfg.score == ScoreEstimator::EstimatorGradient {
        for (gi, ci) in g.iter_mut().zip(estimator_correction(state, &eval)) {
            *gi += ci;
        }
    }

    let grads: Vec<Vec<f64>> = (0..k_count)
        .into_par_iter()
        .map(|k| grad_l_all(kern, ps.group(k), d))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = (0..k_count)
        .into_par_iter()
        .map(|k| loss_estimate(kern, ps.group(k), d))
        .collect::<Result<_>>()?;

    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..k_count {
        let gk = &g[k * n * d..(k + 1) * n * d];
        num -= p[k] * p[k] * dot(&grads[k], gk) / n as f64;
        den += p[k] * p[k] * dot(gk, gk) / n as f64;
    }

    let (grad_pf, grad_pkl) = if mode == FlowMode::DynamicWeights {
        let gpf: Vec<f64> = (0..k_count)
            .map(|k| losses[k] - cfg.theta * cfg.beta / p[k].powf(cfg.beta + 1.0))
            .collect();
        let gpkl = kl_grad_weights_from(state, &eval);
        let pa = project_simplex_tangent(&gpf);
        let pb = project_simplex_tangent(&gpkl);
        // Weights advance by eta2 while particles advance by eta, so the
        // weight contribution to the one-step KL change carries eta2/eta.
        let r = cfg.eta2 / cfg.eta;
        num -= r * dot(&pa, &pb);
        den += r * dot(&pb, &pb);
        (gpf, gpkl)
    } else {
        (Vec::new(), Vec::new())
    };

    let den = den.max(cfg.denom_floor);
    let lambda = (num + cfg.alpha * eval.kl.max(0.0)) / den;
    if !lambda.is_finite() {
        return Err(DecompError::Numerical(format!("lambda evaluated to {lambda}")));
    }

    let phi: Vec<Vec<f64>> = (0..k_count)
        .map(|k| {
            let gk = &g[k * n * d..(k + 1) * n * d];
            grads[k].iter().zip(gk).map(|(a, b)| -p[k] * (a + lambda * b)).collect()
        })
        .collect();

    let weight_velocity = if mode == FlowMode::DynamicWeights {
        let raw: Vec<f64> = grad_pf.iter().zip(&grad_pkl).map(|(a, b)| a + lambda * b).collect();
        project_simplex_tangent(&raw).into_iter().map(|v| -v).collect()
    } else {
        vec![0.0; k_count]
    };

    let mut phi_norm: f64 = phi.iter().map(|f| dot(f, f) / n as f64).sum();
    let mut objective: f64 = p.iter().zip(&losses).map(|(a, b)| a * b).sum();
    if mode == FlowMode::DynamicWeights {
        phi_norm += dot(&weight_velocity, &weight_velocity);
        objective += p.iter().map(|pk| cfg.theta / pk.powf(cfg.beta)).sum::<f64>();
    }

    Ok(FlowEval {
        velocity: VelocityField { phi, lambda, weight_velocity },
        kl: eval.kl,
        objective,
        phi_norm,
        bandwidth: eval.bandwidth,
        lambda_denominator: den,
        group_losses: losses,
    })
}

pub fn velocity_fixed(
    state: &DecompositionState,
    kern: &KernelSpec,
    target: &TargetSpec,
    cfg: &FlowConfig,
) -> Result<VelocityField> {
    Ok(evaluate(state, kern, target, cfg, FlowMode::FixedWeights)?.velocity)
}

pub fn velocity_dynamic(
    state: &DecompositionState,
    kern: &KernelSpec,
    target: &TargetSpec,
    cfg: &FlowConfig,
) -> Result<VelocityField> {
    Ok(evaluate(state, kern, target, cfg, FlowMode::DynamicWeights)?.velocity)
}

fn move_particles(
    particles: &ParticleSet,
    vel: &VelocityField,
    eta: f64,
    guard: PositivityGuard,
) -> Result<ParticleSet> {
    if vel.phi.len() != particles.k() {
        return config("velocity field does not match the particle groups");
    }
    let groups = particles
        .groups()
        .iter()
        .zip(&vel.phi)
        .map(|(x, phi)| {
            x.iter()
                .zip(phi)
                .map(|(&xi, &fi)| match guard {
                    PositivityGuard::None | PositivityGuard::Auto => xi + eta * fi,
                    PositivityGuard::Reflect => {
                        let prop = xi + eta * fi;
                        if prop == 0.0 {
                            0.5 * xi
                        } else {
                            prop.abs()
                        }
                    }
                    PositivityGuard::LogDomain => xi * (eta * fi / xi).exp(),
                })
                .collect()
        })
        .collect();
    ParticleSet::new(particles.dim(), groups)
}

/// x ← x + ηφ for every particle (guard applied); weights unchanged.
pub fn step_fixed(
    state: &DecompositionState,
    vel: &VelocityField,
    eta: f64,
    guard: PositivityGuard,
) -> Result<DecompositionState> {
    Ok(DecompositionState {
        particles: move_particles(&state.particles, vel, eta, guard)?,
        weights: state.weights.clone(),
        iteration: state.iteration + 1,
        rng_seed: state.rng_seed,
    })
}

/// Raises every component below `floor` to `floor` and rescales the others
/// proportionally so the total is 1, repeating until no component is below
/// the floor.
pub fn floor_and_renormalize(raw: &[f64], floor: f64) -> Vec<f64> {
    let k = raw.len();
    let mut clamped = vec![false; k];
    loop {
        let fixed = floor * clamped.iter().filter(|c| **c).count() as f64;
        let free_sum: f64 = (0..k).filter(|&i| !clamped[i]).map(|i| raw[i]).sum();
        if !(free_sum > 0.0) || fixed >= 1.0 {
            return vec![1.0 / k as f64; k];
        }
        let scale = (1.0 - fixed) / free_sum;
        let p: Vec<f64> = (0..k).map(|i| if clamped[i] { floor } else { raw[i] * scale }).collect();
        let mut changed = false;
        for i in 0..k {
            if !clamped[i] && p[i] < floor {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return p;
        }
    }
}

/// Particles move by ηφ first, then weights by η₂v followed by the floor
/// and renormalization.
pub fn step_dynamic(
    state: &DecompositionState,
    vel: &VelocityField,
    eta: f64,
    eta2: f64,
    p_floor: f64,
    guard: PositivityGuard,
) -> Result<DecompositionState> {
    let particles = move_particles(&state.particles, vel, eta, guard)?;
    let raw: Vec<f64> = state
        .weights
        .as_slice()
        .iter()
        .zip(&vel.weight_velocity)
        .map(|(p, v)| p + eta2 * v)
        .collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(DecompError::Numerical("weight update is non-finite".into()));
    }
    Ok(DecompositionState {
        particles,
        weights: WeightVector::from_raw(floor_and_renormalize(&raw, p_floor)),
        iteration: state.iteration + 1,
        rng_seed: state.rng_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub iteration: usize,
    pub message: String,
}

/// Everything recorded during one flow run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub kl: Vec<f64>,
    pub objective: Vec<f64>,
    pub lambda: Vec<f64>,
    pub phi_norm: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bandwidth: Vec<f64>,
    /// (iteration, particles) pairs; the final state is always included.
    pub snapshots: Vec<(usize, ParticleSet)>,
    pub config: FlowConfig,
    pub seed: u64,
    pub rng: &'static str,
    /// Set when the run stopped early; the series then end at the last
    /// successfully evaluated iteration.
    pub failure: Option<Failure>,
    pub final_state: DecompositionState,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.kl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kl.is_empty()
    }

    /// The trace as CSV: `t,kl,objective,lambda,phi_norm,bandwidth,p_1..p_K`.
    pub fn trace_csv(&self) -> String {
        let k = self.final_state.k();
        let mut s = String::from("t,kl,objective,lambda,phi_norm,bandwidth");
        for j in 1..=k {
            s.push_str(&format!(",p_{j}"));
        }
        s.push('\n');
        for t in 0..self.len() {
            s.push_str(&format!(
                "{t},{},{},{},{},{}",
                self.kl[t], self.objective[t], self.lambda[t], self.phi_norm[t], self.bandwidth[t]
            ));
            for p in &self.weights[t] {
                s.push_str(&format!(",{p}"));
            }
            s.push('\n');
        }
        s
    }

    /// Snapshot CSV for the stored snapshot at `index`.
    pub fn snapshot_csv(&self, index: usize) -> Result<String> {
        let (t, ps) = &self.snapshots[index];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, *t, ps)?;
        String::from_utf8(buf).map_err(|e| DecompError::Parse(e.to_string()))
    }
}

/// Runs `cfg.iterations` flow steps from `state`. A mid-run failure is
/// recorded in [`RunRecord::failure`] rather than returned as an error.
pub fn run_from_state(
    mut state: DecompositionState,
    kern: &KernelSpec,
    target: &TargetSpec,
    cfg: &FlowConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    kern.validate(Some(state.particles.dim()))?;
    let guard = cfg.positivity_guard.resolve(kern, target);
    let mut rec = RunRecord {
        kl: Vec::new(),
        objective: Vec::new(),
        lambda: Vec::new(),
        phi_norm: Vec::new(),
        weights: Vec::new(),
        bandwidth: Vec::new(),
        snapshots: Vec::new(),
        config: cfg.clone(),
        seed: state.rng_seed,
        rng: RNG_NAME,
        failure: None,
        final_state: state.clone(),
    };
    for t in 0..=cfg.iterations {
        let eval = match evaluate(&state, kern, target, cfg, cfg.mode) {
            Ok(e) => e,
            Err(e) => {
                rec.failure = Some(Failure { iteration: t, message: e.to_string() });
                break;
            }
        };
        rec.kl.push(eval.kl);
        rec.objective.push(eval.objective);
        rec.lambda.push(eval.velocity.lambda);
        rec.phi_norm.push(eval.phi_norm);
        rec.weights.push(state.weights.as_slice().to_vec());
        rec.bandwidth.push(eval.bandwidth);
        if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 && t < cfg.iterations {
            rec.snapshots.push((t, state.particles.clone()));
        }
        if t == cfg.iterations {
            break;
        }
        let next = match cfg.mode {
            FlowMode::FixedWeights => step_fixed(&state, &eval.velocity, cfg.eta, guard),
            FlowMode::DynamicWeights => {
                step_dynamic(&state, &eval.velocity, cfg.eta, cfg.eta2, cfg.p_floor, guard)
            }
        };
        match next {
            Ok(s) => state = s,
            Err(e) => {
                rec.failure = Some(Failure { iteration: t + 1, message: e.to_string() });
                break;
            }
        }
    }
    rec.snapshots.push((state.iteration, state.particles.clone()));
    rec.final_state = state;
    Ok(rec)
}

/// Fixed-weight run: K groups of N i.i.d. π-samples.
#[allow(clippy::too_many_arguments)]
pub fn run_fixed(
    target: &TargetSpec,
    kern: &KernelSpec,
    k: usize,
    n: usize,
    weights: &WeightInit,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<RunRecord> {
    let state = init_state(target, k, n, seed, weights, &ParticleInit::Target, cfg.p_floor)?;
    let cfg = FlowConfig { mode: FlowMode::FixedWeights, ..cfg.clone() };
    run_from_state(state, kern, target, &cfg)
}

/// Dynamic-weight run: equal initial weights that evolve with the flow.
pub fn run_dynamic(
    target: &TargetSpec,
    kern: &KernelSpec,
    k: usize,
    n: usize,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<RunRecord> {
    let state = init_state(target, k, n, seed, &WeightInit::Equal, &ParticleInit::Target, cfg.p_floor)?;
    let cfg = FlowConfig { mode: FlowMode::DynamicWeights, ..cfg.clone() };
    run_from_state(state, kern, target, &cfg)
}

//! Finite-dimensional constraint-controlled gradient flow
//! ẋ = −(∇f + λ(x)∇g) with λ = (−⟨∇g,∇f⟩ + αg)/‖∇g‖², which makes
//! g(x(t)) = e^{−αt} g(x₀) along exact trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{config, DecompError, Result};

/// Minimize f subject to g = 0, with g ≥ 0.
pub trait EuclideanProblem {
    fn dim(&self) -> usize;
    fn f(&self, x: &[f64]) -> f64;
    fn grad_f(&self, x: &[f64]) -> Vec<f64>;
    fn g(&self, x: &[f64]) -> f64;
    fn grad_g(&self, x: &[f64]) -> Vec<f64>;
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A problem assembled from closures.
pub struct FnProblem {
    pub dim: usize,
    pub f: ScalarFn,
    pub grad_f: VectorFn,
    pub g: ScalarFn,
    pub grad_g: VectorFn,
}

impl EuclideanProblem for FnProblem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn f(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn grad_f(&self, x: &[f64]) -> Vec<f64> {
        (self.grad_f)(x)
    }
    fn g(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }
    fn grad_g(&self, x: &[f64]) -> Vec<f64> {
        (self.grad_g)(x)
    }
}

/// Constants of the convergence bound, known in closed form for the
/// built-in problems: f ≥ `f_min`, ‖∇f‖ ≤ `lip`, ‖∇g‖² ≥ `kappa`·g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    pub f_min: f64,
    pub lip: f64,
    pub kappa: f64,
}

/// A registry entry: a problem, its default start and its bound constants.
pub struct NamedProblem {
    pub name: &'static str,
    pub problem: FnProblem,
    pub x0: Vec<f64>,
    pub constants: Option<ProblemConstants>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_PROBLEMS: [&str; 4] = ["quadratic", "linear_plane", "huber_plane", "quad_sphere"];

/// Built-in test problems.
///
/// * `quadratic`: f ≡ 0, g = ½‖x‖², n = 2 — pure constraint decay.
/// * `linear_plane`: f = x₁, g = ½x₂² — unbounded f, exercises the step.
/// * `huber_plane`: f = √(1 + ‖x − (1,2)‖²), g = ½x₂²; f ≥ 1, ‖∇f‖ ≤ 1, κ = 2.
/// * `quad_sphere`: f = ½‖x − (2,1)‖², g = ¼(‖x‖² − 1)² — the unit circle.
pub fn builtin_problem(name: &str) -> Result<NamedProblem> {
    let p = match name {
        "quadratic" => NamedProblem {
            name: "quadratic",
            problem: FnProblem {
                dim: 2,
                f: Box::new(|_| 0.0),
                grad_f: Box::new(|x| vec![0.0; x.len()]),
                g: Box::new(|x| 0.5 * dot(x, x)),
                grad_g: Box::new(|x| x.to_vec()),
            },
            x0: vec![2.0, 1.0],
            constants: Some(ProblemConstants { f_min: 0.0, lip: 0.0, kappa: 2.0 }),
        },
        "linear_plane" => NamedProblem {
            name: "linear_plane",
            problem: FnProblem {
                dim: 2,
                f: Box::new(|x| x[0]),
                grad_f: Box::new(|_| vec![1.0, 0.0]),
                g: Box::new(|x| 0.5 * x[1] * x[1]),
                grad_g: Box::new(|x| vec![0.0, x[1]]),
            },
            x0: vec![0.0, 1.0],
            constants: None,
        },
        "huber_plane" => NamedProblem {
            name: "huber_plane",
            problem: FnProblem {
                dim: 2,
                f: Box::new(|x| (1.0 + (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2)).sqrt()),
                grad_f: Box::new(|x| {
                    let r = (1.0 + (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2)).sqrt();
                    vec![(x[0] - 1.0) / r, (x[1] - 2.0) / r]
                }),
                g: Box::new(|x| 0.5 * x[1] * x[1]),
                grad_g: Box::new(|x| vec![0.0, x[1]]),
            },
            x0: vec![-3.0, 1.5],
            constants: Some(ProblemConstants { f_min: 1.0, lip: 1.0, kappa: 2.0 }),
        },
        "quad_sphere" => NamedProblem {
            name: "quad_sphere",
            problem: FnProblem {
                dim: 2,
                f: Box::new(|x| 0.5 * ((x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2))),
                grad_f: Box::new(|x| vec![x[0] - 2.0, x[1] - 1.0]),
                g: Box::new(|x| 0.25 * (dot(x, x) - 1.0).powi(2)),
                grad_g: Box::new(|x| {
                    let s = dot(x, x) - 1.0;
                    x.iter().map(|v| s * v).collect()
                }),
            },
            x0: vec![0.5, 1.5],
            constants: None,
        },
        other => {
            return config(format!(
                "unknown problem {other:?}; choose one of {}",
                BUILTIN_PROBLEMS.join(", ")
            ))
        }
    };
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaVariant {
    #[default]
    Equality,
    /// λ replaced by max(λ, 0).
    PositivePart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuclidFlowConfig {
    pub alpha: f64,
    pub tau: f64,
    pub scheme: Scheme,
    pub lambda_variant: LambdaVariant,
    pub max_steps: usize,
    pub denom_floor: f64,
}

impl Default for EuclidFlowConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau: 1e-3,
            scheme: Scheme::Rk4,
            lambda_variant: LambdaVariant::Equality,
            max_steps: 10_000_000,
            denom_floor: 1e-12,
        }
    }
}

impl EuclidFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return config(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return config(format!("tau must be positive, got {}", self.tau));
        }
        if self.alpha * self.tau >= 1.0 {
            return config(format!(
                "alpha*tau = {} must be below 1",
                self.alpha * self.tau
            ));
        }
        if !(self.denom_floor > 0.0) {
            return config("denom_floor must be positive");
        }
        Ok(())
    }
}

/// The multiplier λ(x); the denominator is floored at `denom_floor`.
pub fn lambda_euclid(
    prob: &dyn EuclideanProblem,
    x: &[f64],
    alpha: f64,
    denom_floor: f64,
    variant: LambdaVariant,
) -> Result<f64> {
    let gf = prob.grad_f(x);
    let gg = prob.grad_g(x);
    let gval = prob.g(x);
    if gf.iter().chain(&gg).any(|v| !v.is_finite()) || !gval.is_finite() {
        return Err(DecompError::Numerical(format!("non-finite gradient at {x:?}")));
    }
    let nrm2 = dot(&gg, &gg);
    if gval > 0.0 && nrm2 == 0.0 {
        return Err(DecompError::Assumption(format!(
            "g(x) = {gval} > 0 but grad g vanishes at {x:?}"
        )));
    }
    let lam = (-dot(&gg, &gf) + alpha * gval) / nrm2.max(denom_floor);
    Ok(match variant {
        LambdaVariant::Equality => lam,
        LambdaVariant::PositivePart => lam.max(0.0),
    })
}

/// The velocity φ(x) = −(∇f + λ∇g).
pub fn velocity(prob: &dyn EuclideanProblem, x: &[f64], cfg: &EuclidFlowConfig) -> Result<Vec<f64>> {
    let lam = lambda_euclid(prob, x, cfg.alpha, cfg.denom_floor, cfg.lambda_variant)?;
    let gf = prob.grad_f(x);
    let gg = prob.grad_g(x);
    Ok(gf.iter().zip(&gg).map(|(a, b)| -(a + lam * b)).collect())
}

/// One explicit step x' = x + τφ(x).
pub fn ccgf_step(prob: &dyn EuclideanProblem, x: &[f64], cfg: &EuclidFlowConfig) -> Result<Vec<f64>> {
    let v = velocity(prob, x, cfg)?;
    Ok(x.iter().zip(&v).map(|(a, b)| a + cfg.tau * b).collect())
}

fn axpy(x: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(p, q)| p + a * q).collect()
}

fn rk4_step(prob: &dyn EuclideanProblem, x: &[f64], cfg: &EuclidFlowConfig) -> Result<Vec<f64>> {
    let h = cfg.tau;
    let k1 = velocity(prob, x, cfg)?;
    let k2 = velocity(prob, &axpy(x, 0.5 * h, &k1), cfg)?;
    let k3 = velocity(prob, &axpy(x, 0.5 * h, &k2), cfg)?;
    let k4 = velocity(prob, &axpy(x, h, &k3), cfg)?;
    Ok((0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// ‖∇f − (⟨∇f,∇g⟩/‖∇g‖²)∇g‖, the part of ∇f tangent to the level set of g
/// (‖∇f‖ when ∇g = 0).
pub fn tangent_residual(prob: &dyn EuclideanProblem, x: &[f64]) -> f64 {
    let gf = prob.grad_f(x);
    let gg = prob.grad_g(x);
    let nrm2 = dot(&gg, &gg);
    if nrm2 == 0.0 {
        return dot(&gf, &gf).sqrt();
    }
    let c = dot(&gf, &gg) / nrm2;
    gf.iter().zip(&gg).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt()
}

/// One recorded trajectory sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub g: f64,
    pub f: f64,
    pub phi_norm: f64,
    pub kkt_residual: f64,
    /// Running minimum of `kkt_residual` up to and including this sample.
    pub kkt_running_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("a trajectory always holds its start")
    }

    /// `t,g,f,kkt_residual,x1..xn` rows.
    pub fn to_csv(&self) -> String {
        let n = self.points.first().map_or(0, |p| p.x.len());
        let mut s = String::from("t,g,f,kkt_residual");
        for j in 1..=n {
            s.push_str(&format!(",x{j}"));
        }
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}", p.t, p.g, p.f, p.kkt_residual));
            for v in &p.x {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn sample(prob: &dyn EuclideanProblem, t: f64, x: Vec<f64>, cfg: &EuclidFlowConfig, prev_min: f64) -> Result<TrajectoryPoint> {
    let v = velocity(prob, &x, cfg)?;
    let kkt = tangent_residual(prob, &x);
    Ok(TrajectoryPoint {
        t,
        g: prob.g(&x),
        f: prob.f(&x),
        phi_norm: dot(&v, &v).sqrt(),
        kkt_residual: kkt,
        kkt_running_min: prev_min.min(kkt),
        x,
    })
}

/// Integrates from `x0` to `t_end` with step τ, recording every step.
pub fn integrate(prob: &dyn EuclideanProblem, x0: &[f64], cfg: &EuclidFlowConfig, t_end: f64) -> Result<Trajectory> {
    cfg.validate()?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return config(format!("T_end must be positive, got {t_end}"));
    }
    if x0.len() != prob.dim() {
        return config(format!("x0 has dimension {}, the problem has {}", x0.len(), prob.dim()));
    }
    let steps = (t_end / cfg.tau - 1e-9).ceil() as usize;
    if steps > cfg.max_steps {
        return config(format!("{steps} steps exceed max_steps = {}", cfg.max_steps));
    }
    let mut points = Vec::with_capacity(steps + 1);
    points.push(sample(prob, 0.0, x0.to_vec(), cfg, f64::INFINITY)?);
    let mut x = x0.to_vec();
    for s in 1..=steps {
        x = match cfg.scheme {
            Scheme::Euler => ccgf_step(prob, &x, cfg)?,
            Scheme::Rk4 => rk4_step(prob, &x, cfg)?,
        };
        let t = s as f64 * cfg.tau;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DecompError::Numerical(format!("state became non-finite at t = {t}")));
        }
        let prev = points.last().map_or(f64::INFINITY, |p: &TrajectoryPoint| p.kkt_running_min);
        points.push(sample(prob, t, x.clone(), cfg, prev)?);
    }
    Ok(Trajectory { points })
}

/// C = f(x₀) − f_min + 2g(x₀)/κ + (L/(α√κ))·√g(x₀), the constant in the
/// min-residual bound C/√T.
pub fn residual_bound_constant(prob: &dyn EuclideanProblem, x0: &[f64], alpha: f64, c: &ProblemConstants) -> f64 {
    let g0 = prob.g(x0);
    prob.f(x0) - c.f_min + 2.0 * g0 / c.kappa + c.lip / (alpha * c.kappa.sqrt()) * g0.sqrt()
}

//! Gaussian kernel density estimation of the pooled mixture μ̄, its score,
//! and the plug-in KL(μ̄‖π) estimators used by the flow.
//!
//! All per-point work goes through rayon; reductions are sequential sums in a
//! fixed order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{pooled_samples, DecompositionState, WeightedPoints};
use crate::error::{config, DecompError, Result};
use crate::targets::TargetSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Silverman's rule per dimension on the weighted pooled sample; the
    /// smallest per-axis value is used as the isotropic bandwidth.
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
    /// Report densities with the dimension-free 1/√(2π) kernel constant
    /// instead of (2πh²)^(−d/2). Never used by the KL estimators.
    #[serde(default)]
    pub dimension_free_constant: bool,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Silverman, dimension_free_constant: false }
    }
}

impl KdeConfig {
    pub fn fixed(h: f64) -> Self {
        Self { bandwidth: Bandwidth::Fixed(h), dimension_free_constant: false }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return config(format!("fixed bandwidth must be positive, got {h}"));
            }
        }
        Ok(())
    }
}

/// Silverman's rule-of-thumb bandwidth, isotropic (minimum over axes).
pub fn silverman(points: &WeightedPoints) -> f64 {
    let d = points.dim;
    let n = points.len() as f64;
    let factor = (4.0 / (d as f64 + 2.0)).powf(1.0 / (d as f64 + 4.0)) * n.powf(-1.0 / (d as f64 + 4.0));
    let wsum: f64 = points.weights.iter().sum();
    let mut sd_min = f64::INFINITY;
    for j in 0..d {
        let mean: f64 = (0..points.len()).map(|i| points.weights[i] * points.point(i)[j]).sum::<f64>() / wsum;
        let var: f64 = (0..points.len())
            .map(|i| points.weights[i] * (points.point(i)[j] - mean).powi(2))
            .sum::<f64>()
            / wsum;
        sd_min = sd_min.min(var.sqrt());
    }
    factor * sd_min
}

/// Resolves the configured bandwidth for a pooled sample.
pub fn bandwidth(cfg: &KdeConfig, points: &WeightedPoints) -> Result<f64> {
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Silverman => silverman(points),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(DecompError::Numerical(format!(
            "bandwidth evaluated to {h}; the pooled sample has collapsed"
        )));
    }
    Ok(h)
}

/// A weighted Gaussian KDE with a resolved bandwidth.
pub struct Kde<'a> {
    points: &'a WeightedPoints,
    h: f64,
    log_norm: f64,
    log_w: Vec<f64>,
}

impl<'a> Kde<'a> {
    pub fn new(points: &'a WeightedPoints, h: f64) -> Self {
        let d = points.dim as f64;
        Self {
            points,
            h,
            log_norm: -0.5 * d * (LN_2PI + 2.0 * h.ln()),
            log_w: points.weights.iter().map(|w| w.ln()).collect(),
        }
    }

    /// Same estimator, reported with the dimension-free 1/√(2π) constant.
    pub fn with_dimension_free_constant(mut self) -> Self {
        self.log_norm = -0.5 * LN_2PI;
        self
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    /// log G-terms `ln w_j − ‖x − x_j‖²/(2h²)` for every data point.
    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let inv = 0.5 / (self.h * self.h);
        (0..self.points.len())
            .map(|j| {
                let p = self.points.point(j);
                let r2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                self.log_w[j] - inv * r2
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let t = self.log_terms(x);
        let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + t.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + self.log_norm
    }

    /// (log μ̂(x), ∇ log μ̂(x)).
    pub fn log_density_and_score(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.points.dim;
        let t = self.log_terms(x);
        let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut acc = vec![0.0; d];
        for (j, v) in t.iter().enumerate() {
            let r = (v - m).exp();
            total += r;
            for (a, (p, q)) in acc.iter_mut().zip(self.points.point(j).iter().zip(x)) {
                *a += r * (p - q);
            }
        }
        let h2 = self.h * self.h;
        let score = acc.into_iter().map(|a| a / (total * h2)).collect();
        (m + total.ln() + self.log_norm, score)
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.log_density_and_score(x).1
    }
}

pub fn kde_log_density(points: &WeightedPoints, cfg: &KdeConfig, x: &[f64]) -> Result<f64> {
    let kde = Kde::new(points, bandwidth(cfg, points)?);
    Ok(if cfg.dimension_free_constant { kde.with_dimension_free_constant() } else { kde }.log_density(x))
}

pub fn kde_score(points: &WeightedPoints, cfg: &KdeConfig, x: &[f64]) -> Result<Vec<f64>> {
    Ok(Kde::new(points, bandwidth(cfg, points)?).score(x))
}

/// Every per-particle quantity of one density evaluation over the pooled
/// sample. Vectors are indexed by pooled position (group-major).
#[derive(Debug, Clone)]
pub struct PooledEval {
    pub bandwidth: f64,
    pub weights: Vec<f64>,
    pub log_kde: Vec<f64>,
    pub kde_score: Vec<f64>,
    pub log_target: Vec<f64>,
    pub target_score: Vec<f64>,
    /// Unclamped Σᵢ wᵢ (log μ̂(xᵢ) − log π(xᵢ)).
    pub kl: f64,
}

fn domain_at(state: &DecompositionState, idx: usize, e: impl std::fmt::Display) -> DecompError {
    let n = state.particles.n();
    DecompError::Domain(format!("particle {} of group {}: {e}", idx % n, idx / n))
}

/// Evaluates the KDE, π and both scores at every pooled particle.
pub fn evaluate_pooled(state: &DecompositionState, target: &TargetSpec, cfg: &KdeConfig) -> Result<PooledEval> {
    let pooled = pooled_samples(state);
    if pooled.dim != target.dim() {
        return config(format!(
            "particles have d = {} but the target has d = {}",
            pooled.dim,
            target.dim()
        ));
    }
    let h = bandwidth(cfg, &pooled)?;
    let kde = Kde::new(&pooled, h);
    let per_point: Vec<(f64, Vec<f64>, f64, Vec<f64>)> = (0..pooled.len())
        .into_par_iter()
        .map(|i| {
            let x = pooled.point(i);
            let lt = target.log_density(x);
            if lt == f64::NEG_INFINITY {
                return Err(domain_at(state, i, format!("{x:?} lies outside the target support")));
            }
            let st = target.score(x).map_err(|e| domain_at(state, i, e))?;
            let (lk, sk) = kde.log_density_and_score(x);
            Ok((lk, sk, lt, st))
        })
        .collect::<Result<_>>()?;
    let mut out = PooledEval {
        bandwidth: h,
        weights: pooled.weights.clone(),
        log_kde: Vec::with_capacity(pooled.len()),
        kde_score: Vec::with_capacity(pooled.coords.len()),
        log_target: Vec::with_capacity(pooled.len()),
        target_score: Vec::with_capacity(pooled.coords.len()),
        kl: 0.0,
    };
    for (lk, sk, lt, st) in per_point {
        out.log_kde.push(lk);
        out.kde_score.extend(sk);
        out.log_target.push(lt);
        out.target_score.extend(st);
    }
    out.kl = out
        .weights
        .iter()
        .zip(out.log_kde.iter().zip(&out.log_target))
        .map(|(w, (a, b))| w * (a - b))
        .sum();
    Ok(out)
}

/// The correction cᵢ = Σⱼ wⱼ G_h(xⱼ − xᵢ)(xⱼ − xᵢ) / (h² μ̂(xⱼ)) that turns
/// `kde_score − target_score` into the exact particle gradient of the KL
/// estimator (divided by the particle's own weight).
pub fn estimator_correction(state: &DecompositionState, eval: &PooledEval) -> Vec<f64> {
    let pooled = pooled_samples(state);
    let d = pooled.dim;
    let h2 = eval.bandwidth * eval.bandwidth;
    let inv = 0.5 / h2;
    let log_norm = -0.5 * d as f64 * (LN_2PI + h2.ln());
    // wⱼ / μ̂(xⱼ) in log form, shared by every row.
    let log_ratio: Vec<f64> = eval.weights.iter().zip(&eval.log_kde).map(|(w, l)| w.ln() - l).collect();
    let rows: Vec<Vec<f64>> = (0..pooled.len())
        .into_par_iter()
        .map(|i| {
            let xi = pooled.point(i);
            let mut acc = vec![0.0; d];
            for j in 0..pooled.len() {
                let xj = pooled.point(j);
                let r2: f64 = xj.iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum();
                let c = (log_ratio[j] + log_norm - inv * r2).exp() / h2;
                for (a, (p, q)) in acc.iter_mut().zip(xj.iter().zip(xi)) {
                    *a += c * (p - q);
                }
            }
            acc
        })
        .collect();
    rows.concat()
}

/// Plug-in estimate Σᵢ wᵢ [log μ̂(xᵢ) − log π(xᵢ)] over the pooled sample.
pub fn kl_estimate(state: &DecompositionState, target: &TargetSpec, cfg: &KdeConfig) -> Result<f64> {
    Ok(evaluate_pooled(state, target, cfg)?.kl)
}

/// Per-group average of `log μ̂ − log π` over the group's particles, plus 1.
pub fn kl_grad_weights_from(state: &DecompositionState, eval: &PooledEval) -> Vec<f64> {
    let n = state.particles.n();
    (0..state.k())
        .map(|k| {
            let s: f64 = (k * n..(k + 1) * n).map(|i| eval.log_kde[i] - eval.log_target[i]).sum();
            s / n as f64 + 1.0
        })
        .collect()
}

/// ∇_p KL: per-group average of `log μ̂ − log π` over the group's particles, plus 1.
pub fn kl_grad_weights(state: &DecompositionState, target: &TargetSpec, cfg: &KdeConfig) -> Result<Vec<f64>> {
    Ok(kl_grad_weights_from(state, &evaluate_pooled(state, target, cfg)?))
}

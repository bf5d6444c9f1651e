//! Reference distributions π: sampling, log-density and analytic score.
//!
//! Log-densities outside the support are `-inf` (never NaN); scores there are
//! a [`DecompError::Domain`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, DecompError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A multivariate normal with its Cholesky factor and precision precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct MvNormal {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl MvNormal {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return config("mvnormal mean must be non-empty");
        }
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return config(format!("mvnormal covariance must be {d}x{d}"));
        }
        if mean.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return config("mvnormal parameters must be finite");
        }
        for i in 0..d {
            for j in 0..i {
                if cov[i][j] != cov[j][i] {
                    return config("mvnormal covariance must be symmetric");
                }
            }
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        let Some(ch) = m.clone().cholesky() else {
            return config("mvnormal covariance must be positive definite");
        };
        let chol = ch.l();
        let precision = ch.inverse();
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Self { mean, cov, chol, precision, log_norm })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[Vec<f64>] {
        &self.cov
    }

    /// Σ⁻¹ as row-major nested vectors.
    pub fn precision(&self) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        (0..d).map(|i| (0..d).map(|j| self.precision[(i, j)]).collect()).collect()
    }

    fn centered(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b))
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let r = self.centered(x);
        let q = r.dot(&(&self.precision * &r));
        self.log_norm - 0.5 * q
    }

    fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.centered(x);
        (-(&self.precision * r)).iter().copied().collect()
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let y = &self.chol * z;
        out.extend(y.iter().zip(&self.mean).map(|(a, b)| a + b));
    }
}

impl Serialize for MvNormal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            mean: &'a [f64],
            cov: &'a [Vec<f64>],
        }
        Repr { mean: &self.mean, cov: &self.cov }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MvNormal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            mean: Vec<f64>,
            cov: Vec<Vec<f64>>,
        }
        let r = Repr::deserialize(d)?;
        MvNormal::new(r.mean, r.cov).map_err(serde::de::Error::custom)
    }
}

/// One weighted component of a [`TargetSpec::Mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    #[serde(flatten)]
    pub spec: TargetSpec,
}

/// The reference distribution family and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TargetSpec {
    Gaussian1d { mean: f64, sd: f64 },
    Mvnormal(MvNormal),
    /// `ln X ~ N(scale, shape^2)`.
    Lognormal { scale: f64, shape: f64 },
    Mixture { components: Vec<Component> },
    /// Uniform on `[a, b]` with logistic edges of steepness `sharpness`
    /// (default `50 / (b - a)`): density ∝ σ(β(x−a))·σ(β(b−x)).
    SmoothedUniform {
        a: f64,
        b: f64,
        #[serde(default)]
        sharpness: Option<f64>,
    },
}

fn log_sigmoid(z: f64) -> f64 {
    // ln σ(z) = −softplus(−z), written to avoid overflow in either tail.
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl TargetSpec {
    pub fn gaussian1d(mean: f64, sd: f64) -> Result<Self> {
        let t = TargetSpec::Gaussian1d { mean, sd };
        t.validate()?;
        Ok(t)
    }

    pub fn mvnormal(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        Ok(TargetSpec::Mvnormal(MvNormal::new(mean, cov)?))
    }

    /// Bivariate normal from marginal standard deviations and correlation.
    pub fn bivariate(mean: [f64; 2], sd: [f64; 2], rho: f64) -> Result<Self> {
        let c = rho * sd[0] * sd[1];
        Self::mvnormal(mean.to_vec(), vec![vec![sd[0] * sd[0], c], vec![c, sd[1] * sd[1]]])
    }

    pub fn lognormal(scale: f64, shape: f64) -> Result<Self> {
        let t = TargetSpec::Lognormal { scale, shape };
        t.validate()?;
        Ok(t)
    }

    pub fn mixture(components: Vec<(f64, TargetSpec)>) -> Result<Self> {
        let t = TargetSpec::Mixture {
            components: components.into_iter().map(|(weight, spec)| Component { weight, spec }).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn smoothed_uniform(a: f64, b: f64, sharpness: Option<f64>) -> Result<Self> {
        let t = TargetSpec::SmoothedUniform { a, b, sharpness };
        t.validate()?;
        Ok(t)
    }

    /// Checks every family invariant, recursing into mixtures.
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetSpec::Gaussian1d { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0 && sd.is_finite()) {
                    return config(format!("gaussian1d needs finite mean and sd > 0 (sd = {sd})"));
                }
            }
            TargetSpec::Mvnormal(_) => {}
            TargetSpec::Lognormal { scale, shape } => {
                if !scale.is_finite() || !(*shape > 0.0 && shape.is_finite()) {
                    return config(format!("lognormal needs finite scale and shape > 0 (shape = {shape})"));
                }
            }
            TargetSpec::Mixture { components } => {
                if components.is_empty() {
                    return config("mixture needs at least one component");
                }
                let d = components[0].spec.dim();
                let mut sum = 0.0;
                for c in components {
                    c.spec.validate()?;
                    if c.spec.dim() != d {
                        return config("mixture components must share one dimension");
                    }
                    if !(c.weight > 0.0 && c.weight.is_finite()) {
                        return config(format!("mixture weight {} must be positive", c.weight));
                    }
                    sum += c.weight;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return config(format!("mixture weights sum to {sum}, not 1"));
                }
            }
            TargetSpec::SmoothedUniform { a, b, sharpness } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return config(format!("smoothed_uniform needs a < b (a = {a}, b = {b})"));
                }
                if let Some(s) = sharpness {
                    if !(*s > 0.0 && s.is_finite()) {
                        return config("smoothed_uniform sharpness must be positive");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::Mvnormal(m) => m.mean.len(),
            TargetSpec::Mixture { components } => components.first().map_or(1, |c| c.spec.dim()),
            _ => 1,
        }
    }

    /// True when the support is the positive half-line.
    pub fn is_positive(&self) -> bool {
        match self {
            TargetSpec::Lognormal { .. } => true,
            TargetSpec::Mixture { components } => components.iter().all(|c| c.spec.is_positive()),
            _ => false,
        }
    }

    fn uniform_sharpness(a: f64, b: f64, sharpness: Option<f64>) -> f64 {
        sharpness.unwrap_or(50.0 / (b - a))
    }

    /// Draws `n` points, flat row-major.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            self.sample_one(rng, &mut out);
        }
        out
    }

    /// Draws `n` points from a fresh generator seeded with `seed`.
    pub fn sample_seeded(&self, n: usize, seed: u64) -> Vec<f64> {
        self.sample(n, &mut crate::ensemble::rng_from_seed(seed))
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match self {
            TargetSpec::Gaussian1d { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                out.push(mean + sd * z);
            }
            TargetSpec::Mvnormal(m) => m.sample_into(rng, out),
            TargetSpec::Lognormal { scale, shape } => {
                let z: f64 = StandardNormal.sample(rng);
                out.push((scale + shape * z).exp());
            }
            TargetSpec::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let last = components.len() - 1;
                for (j, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc || j == last {
                        c.spec.sample_one(rng, out);
                        break;
                    }
                }
            }
            TargetSpec::SmoothedUniform { a, b, sharpness } => {
                // Rejection from a uniform proposal on the widened interval;
                // the density ratio is the product of the two logistic edges.
                let beta = Self::uniform_sharpness(*a, *b, *sharpness);
                let pad = 40.0 / beta;
                loop {
                    let x = rng.random_range((a - pad)..(b + pad));
                    let accept = sigmoid(beta * (x - a)) * sigmoid(beta * (b - x));
                    if rng.random::<f64>() < accept {
                        out.push(x);
                        break;
                    }
                }
            }
        }
    }

    /// Natural-log density; `-inf` outside the support.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            TargetSpec::Gaussian1d { mean, sd } => {
                let z = (x[0] - mean) / sd;
                -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
            }
            TargetSpec::Mvnormal(m) => m.log_density(x),
            TargetSpec::Lognormal { scale, shape } => {
                let v = x[0];
                if !(v > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let lv = v.ln();
                let z = (lv - scale) / shape;
                -lv - shape.ln() - 0.5 * LN_2PI - 0.5 * z * z
            }
            TargetSpec::Mixture { components } => {
                let terms: Vec<f64> =
                    components.iter().map(|c| c.weight.ln() + c.spec.log_density(x)).collect();
                log_sum_exp(&terms)
            }
            TargetSpec::SmoothedUniform { a, b, sharpness } => {
                let beta = Self::uniform_sharpness(*a, *b, *sharpness);
                let len = b - a;
                // ∫ σ(β(x−a))σ(β(b−x)) dx = L / (1 − e^{−βL}).
                let log_z = len.ln() - (-(-beta * len).exp()).ln_1p();
                log_sigmoid(beta * (x[0] - a)) + log_sigmoid(beta * (b - x[0])) - log_z
            }
        }
    }

    /// ∇ log π(x); a domain error outside the open support.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TargetSpec::Gaussian1d { mean, sd } => Ok(vec![-(x[0] - mean) / (sd * sd)]),
            TargetSpec::Mvnormal(m) => Ok(m.score(x)),
            TargetSpec::Lognormal { scale, shape } => {
                let v = x[0];
                if !(v > 0.0) {
                    return Err(DecompError::Domain(format!(
                        "lognormal score needs x > 0, got {v}"
                    )));
                }
                Ok(vec![-1.0 / v - (v.ln() - scale) / (shape * shape * v)])
            }
            TargetSpec::Mixture { components } => {
                let logs: Vec<f64> =
                    components.iter().map(|c| c.weight.ln() + c.spec.log_density(x)).collect();
                let total = log_sum_exp(&logs);
                if total == f64::NEG_INFINITY {
                    return Err(DecompError::Domain(format!(
                        "mixture score requested outside the support at {x:?}"
                    )));
                }
                let mut s = vec![0.0; x.len()];
                for (c, l) in components.iter().zip(&logs) {
                    if *l == f64::NEG_INFINITY {
                        continue;
                    }
                    let r = (l - total).exp();
                    for (acc, g) in s.iter_mut().zip(c.spec.score(x)?) {
                        *acc += r * g;
                    }
                }
                Ok(s)
            }
            TargetSpec::SmoothedUniform { a, b, sharpness } => {
                let beta = Self::uniform_sharpness(*a, *b, *sharpness);
                let v = x[0];
                Ok(vec![beta * sigmoid(-beta * (v - a)) - beta * sigmoid(-beta * (b - v))])
            }
        }
    }

    /// Mean of each coordinate (exact where a closed form exists).
    pub fn mean(&self) -> Vec<f64> {
        match self {
            TargetSpec::Gaussian1d { mean, .. } => vec![*mean],
            TargetSpec::Mvnormal(m) => m.mean.clone(),
            TargetSpec::Lognormal { scale, shape } => vec![(scale + 0.5 * shape * shape).exp()],
            TargetSpec::Mixture { components } => {
                let mut m = vec![0.0; self.dim()];
                for c in components {
                    for (acc, v) in m.iter_mut().zip(c.spec.mean()) {
                        *acc += c.weight * v;
                    }
                }
                m
            }
            TargetSpec::SmoothedUniform { a, b, .. } => vec![0.5 * (a + b)],
        }
    }
}

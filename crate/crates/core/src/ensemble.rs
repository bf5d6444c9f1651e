//! Decomposition state: K particle populations plus their weights.
//!
//! Each population is stored as one flat, row-major `Vec<f64>` of `N * d`
//! coordinates so that the hot loops in the flow stay cache friendly.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, DecompError, Result};
use crate::targets::TargetSpec;

/// Name of the generator behind every random draw, recorded in run metadata.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9)";

/// Default lower bound on every weight.
pub const DEFAULT_P_FLOOR: f64 = 1e-3;

/// Tolerance on `sum(p) = 1` for weights handed in by callers.
const INPUT_SUM_TOL: f64 = 1e-9;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// K groups of N points in R^d, all coordinates finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    n: usize,
    groups: Vec<Vec<f64>>,
}

impl ParticleSet {
    /// Builds a set from flat row-major groups, validating shape and finiteness.
    pub fn new(dim: usize, groups: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return config("particle dimension must be at least 1");
        }
        if groups.is_empty() {
            return config("at least one group is required (K >= 1)");
        }
        let len = groups[0].len();
        if len == 0 || !len.is_multiple_of(dim) {
            return config(format!(
                "group 0 holds {len} coordinates, not a positive multiple of d={dim}"
            ));
        }
        for (k, g) in groups.iter().enumerate() {
            if g.len() != len {
                return config(format!(
                    "group {k} holds {} coordinates but group 0 holds {len}; every group needs N points",
                    g.len()
                ));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(DecompError::Numerical(format!(
                    "non-finite coordinate in group {k}, particle {}",
                    i / dim
                )));
            }
        }
        Ok(Self { dim, n: len / dim, groups })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat coordinates of group `k`.
    pub fn group(&self, k: usize) -> &[f64] {
        &self.groups[k]
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn point(&self, k: usize, i: usize) -> &[f64] {
        &self.groups[k][i * self.dim..(i + 1) * self.dim]
    }

    /// Every coordinate of every group, group-major.
    pub fn all_coords(&self) -> Vec<f64> {
        self.groups.concat()
    }
}

/// Weights on the probability simplex, bounded below by a floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates `p` (non-empty, finite, each `>= floor`, sum 1 within 1e-9)
    /// and rescales it so the sum is 1 to machine precision.
    pub fn new(p: Vec<f64>, floor: f64) -> Result<Self> {
        if p.is_empty() {
            return config("weight vector must be non-empty");
        }
        if !(floor >= 0.0 && floor * p.len() as f64 <= 1.0) {
            return config(format!("weight floor {floor} is infeasible for K={}", p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return config("weights must be finite");
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > INPUT_SUM_TOL {
            return config(format!("weights sum to {sum}, not 1"));
        }
        if let Some(v) = p.iter().find(|v| **v < floor || **v <= 0.0) {
            return config(format!("weight {v} is below the floor {floor}"));
        }
        Ok(Self(p.into_iter().map(|v| v / sum).collect()))
    }

    pub fn equal(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps weights produced by the flow's own update rule, which restores the
    /// simplex invariant itself.
    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        Self(p)
    }
}

/// The pair (μ, p) together with the iteration counter and originating seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionState {
    pub particles: ParticleSet,
    pub weights: WeightVector,
    pub iteration: usize,
    pub rng_seed: u64,
}

impl DecompositionState {
    pub fn new(particles: ParticleSet, weights: WeightVector, rng_seed: u64) -> Result<Self> {
        if particles.k() != weights.len() {
            return config(format!(
                "{} weights given for {} particle groups",
                weights.len(),
                particles.k()
            ));
        }
        Ok(Self { particles, weights, iteration: 0, rng_seed })
    }

    pub fn k(&self) -> usize {
        self.particles.k()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    Equal,
    Explicit(Vec<f64>),
}

impl WeightInit {
    pub fn build(&self, k: usize, floor: f64) -> Result<WeightVector> {
        match self {
            WeightInit::Equal => {
                if k == 0 {
                    return config("K must be at least 1");
                }
                WeightVector::new(vec![1.0 / k as f64; k], floor.min(1.0 / k as f64))
            }
            WeightInit::Explicit(p) => {
                if p.len() != k {
                    return config(format!("{} explicit weights given for K={k}", p.len()));
                }
                WeightVector::new(p.clone(), floor)
            }
        }
    }
}

/// How the particle populations are drawn at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleInit {
    /// Every group i.i.d. from π, so the initial mixture is feasible up to
    /// sampling noise.
    Target,
    /// Group k i.i.d. from an isotropic Gaussian `N(centers[k], scales[k]^2 I)`.
    /// With `log_scale` the Gaussian is drawn for `ln x` instead, which keeps
    /// every coordinate strictly positive.
    Offset {
        centers: Vec<Vec<f64>>,
        scales: Vec<f64>,
        log_scale: bool,
    },
}

/// Samples K groups of N i.i.d. points from π with the requested weights.
pub fn init_from_target(
    target: &TargetSpec,
    k: usize,
    n: usize,
    seed: u64,
    weight_init: &WeightInit,
) -> Result<DecompositionState> {
    init_state(target, k, n, seed, weight_init, &ParticleInit::Target, DEFAULT_P_FLOOR)
}

/// General initializer; a pure function of its arguments.
pub fn init_state(
    target: &TargetSpec,
    k: usize,
    n: usize,
    seed: u64,
    weight_init: &WeightInit,
    particle_init: &ParticleInit,
    p_floor: f64,
) -> Result<DecompositionState> {
    if k == 0 || n == 0 {
        return config(format!("K and N must be at least 1 (got K={k}, N={n})"));
    }
    let weights = weight_init.build(k, p_floor)?;
    let dim = target.dim();
    let mut rng = rng_from_seed(seed);
    let groups = match particle_init {
        ParticleInit::Target => (0..k).map(|_| target.sample(n, &mut rng)).collect(),
        ParticleInit::Offset { centers, scales, log_scale } => {
            if centers.len() != k || scales.len() != k {
                return config(format!(
                    "offset initialization needs {k} centers and {k} scales"
                ));
            }
            let mut groups = Vec::with_capacity(k);
            for (c, &s) in centers.iter().zip(scales) {
                if c.len() != dim {
                    return config(format!("offset center has dimension {}, target has {dim}", c.len()));
                }
                if !(s > 0.0 && s.is_finite()) {
                    return config(format!("offset scale must be positive, got {s}"));
                }
                let mut g = Vec::with_capacity(n * dim);
                for _ in 0..n {
                    for &m in c {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let v = m + s * z;
                        g.push(if *log_scale { v.exp() } else { v });
                    }
                }
                groups.push(g);
            }
            groups
        }
    };
    DecompositionState::new(ParticleSet::new(dim, groups)?, weights, seed)
}

/// The pooled mixture μ̄ = Σ p_k μ_k as a weighted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoints {
    pub dim: usize,
    /// Flat row-major coordinates, group-major order.
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Equal weights 1/M on M points.
    pub fn uniform(dim: usize, coords: Vec<f64>) -> Self {
        let m = coords.len() / dim;
        Self { dim, coords, weights: vec![1.0 / m as f64; m] }
    }
}

/// Pools every particle with weight p_k / N.
pub fn pooled_samples(state: &DecompositionState) -> WeightedPoints {
    let ps = &state.particles;
    let n = ps.n() as f64;
    let weights = state
        .weights
        .as_slice()
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p / n, ps.n()))
        .collect();
    WeightedPoints { dim: ps.dim(), coords: ps.all_coords(), weights }
}

/// Writes a snapshot with header `t,k,i,x1,...,xd` (k and i are 0-based).
pub fn write_snapshot<W: Write>(out: W, t: usize, particles: &ParticleSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "k".to_string(), "i".to_string()];
    header.extend((1..=particles.dim()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for k in 0..particles.k() {
        for i in 0..particles.n() {
            let mut row = vec![t.to_string(), k.to_string(), i.to_string()];
            row.extend(particles.point(k, i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`]; returns its iteration
/// label and the particle set. Rows may appear in any order.
pub fn read_snapshot<R: Read>(input: R) -> Result<(usize, ParticleSet)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(3);
    if dim == 0 || &header[0] != "t" || &header[1] != "k" || &header[2] != "i" {
        return Err(DecompError::Parse("snapshot header must be t,k,i,x1,...".into()));
    }
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut t_label = 0usize;
    for rec in r.records() {
        let rec = rec?;
        let parse_usize = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| DecompError::Parse(format!("bad index {s:?}: {e}")))
        };
        t_label = parse_usize(&rec[0])?;
        let k = parse_usize(&rec[1])?;
        let i = parse_usize(&rec[2])?;
        let x = (3..3 + dim)
            .map(|j| {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| DecompError::Parse(format!("bad coordinate {:?}: {e}", &rec[j])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((k, i, x));
    }
    if rows.is_empty() {
        return Err(DecompError::Parse("snapshot has no particles".into()));
    }
    let k_count = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let n = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    if rows.len() != k_count * n {
        return Err(DecompError::Parse(format!(
            "snapshot has {} rows, expected K*N = {k_count}*{n}",
            rows.len()
        )));
    }
    let mut groups = vec![vec![f64::NAN; n * dim]; k_count];
    for (k, i, x) in rows {
        groups[k][i * dim..(i + 1) * dim].copy_from_slice(&x);
    }
    Ok((t_label, ParticleSet::new(dim, groups)?))
}

//! Structural and application-level diagnostics: (δ,c)-interior supports on
//! a lattice, disjointness and convex-in-pairs checks, objectives, win
//! rates, baseline decompositions, and an exhaustive discrete oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::density::{bandwidth, Kde, KdeConfig};
use crate::ensemble::{rng_from_seed, DecompositionState, ParticleSet, WeightVector, WeightedPoints};
use crate::error::{config, DecompError, Result};
use crate::kernels::{kernel_eval, loss_estimate, KernelSpec};
use crate::wflow::FlowMode;

/// Hard cap on lattice size, to fail fast on a mis-scaled δ.
const MAX_LATTICE_POINTS: usize = 20_000_000;

/// A regular lattice `origin + spacing * idx` with `shape[j]` nodes per axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lattice {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

impl Lattice {
    /// Covers the bounding box of `coords`, inflated by `pad` on every side.
    pub fn covering(coords: &[f64], dim: usize, pad: f64, spacing: f64) -> Result<Self> {
        if coords.is_empty() {
            return config("cannot build a lattice over zero points");
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in coords.chunks_exact(dim) {
            for j in 0..dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let origin: Vec<f64> = lo.iter().map(|v| v - pad).collect();
        let shape: Vec<usize> = (0..dim)
            .map(|j| ((hi[j] + pad - origin[j]) / spacing).ceil() as usize + 1)
            .collect();
        let total = shape.iter().try_fold(1usize, |acc, s| acc.checked_mul(*s));
        match total {
            Some(t) if t <= MAX_LATTICE_POINTS => Ok(Self { origin, spacing, shape }),
            _ => config(format!(
                "lattice of shape {shape:?} is too large; increase delta or the grid spacing"
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            out[j] = idx % self.shape[j];
            idx /= self.shape[j];
        }
        out
    }

    fn flat_index(&self, m: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (j, &v) in m.iter().enumerate() {
            if v < 0 || v as usize >= self.shape[j] {
                return None;
            }
            idx = idx * self.shape[j] + v as usize;
        }
        Some(idx)
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .zip(&self.origin)
            .map(|(&i, o)| o + self.spacing * i as f64)
            .collect()
    }

    /// Index of the lattice node nearest to `x`, if `x` lies inside the lattice.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let m: Vec<i64> = x
            .iter()
            .zip(&self.origin)
            .map(|(v, o)| ((v - o) / self.spacing).round() as i64)
            .collect();
        self.flat_index(&m)
    }

    /// Integer offsets of every node within Euclidean distance `radius`.
    fn ball_offsets(&self, radius: f64) -> Vec<Vec<i64>> {
        let r = (radius / self.spacing + 1e-9).floor() as i64;
        let d = self.dim();
        let mut out = Vec::new();
        let mut cur = vec![-r; d];
        loop {
            let dist2: f64 = cur.iter().map(|v| (*v as f64 * self.spacing).powi(2)).sum();
            if dist2 <= radius * radius * (1.0 + 1e-12) {
                out.push(cur.clone());
            }
            let mut j = 0;
            loop {
                if j == d {
                    return out;
                }
                cur[j] += 1;
                if cur[j] <= r {
                    break;
                }
                cur[j] = -r;
                j += 1;
            }
        }
    }
}

/// Lattice construction options; `None` fields take the documented defaults
/// (spacing δ/2, padding 3h).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub spacing: Option<f64>,
    pub pad: Option<f64>,
}

/// Per-group membership of lattice nodes in S_k(δ, c).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportMask {
    pub lattice: Lattice,
    pub members: Vec<Vec<bool>>,
    pub delta: f64,
    pub c: f64,
    pub bandwidth: f64,
}

impl SupportMask {
    pub fn count(&self, k: usize) -> usize {
        self.members[k].iter().filter(|m| **m).count()
    }
}

fn check_delta_c(delta: f64, c: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) || !(c > 0.0 && c.is_finite()) {
        return config(format!("delta and c must be positive (delta = {delta}, c = {c})"));
    }
    Ok(())
}

/// Marks lattice nodes whose whole δ-ball (on the lattice) has density > c;
/// nodes whose ball leaves the lattice are not marked.
fn erode(lattice: &Lattice, density: &[f64], delta: f64, c: f64) -> Vec<bool> {
    let offsets = lattice.ball_offsets(delta);
    let above: Vec<bool> = density.iter().map(|v| *v > c).collect();
    (0..lattice.len())
        .into_par_iter()
        .map(|idx| {
            if !above[idx] {
                return false;
            }
            let m = lattice.multi_index(idx);
            offsets.iter().all(|o| {
                let q: Vec<i64> = m.iter().zip(o).map(|(a, b)| *a as i64 + b).collect();
                lattice.flat_index(&q).is_some_and(|j| above[j])
            })
        })
        .collect()
}

fn density_on(lattice: &Lattice, points: &WeightedPoints, h: f64) -> Vec<f64> {
    let kde = Kde::new(points, h);
    (0..lattice.len())
        .into_par_iter()
        .map(|idx| kde.log_density(&lattice.point(idx)).exp())
        .collect()
}

fn resolve_lattice(all_coords: &[f64], dim: usize, h: f64, delta: f64, grid: &GridSpec) -> Result<Lattice> {
    let spacing = grid.spacing.unwrap_or(delta / 2.0);
    if !(spacing > 0.0) || spacing > delta / 2.0 * (1.0 + 1e-12) {
        return config(format!(
            "grid spacing {spacing} is too coarse for delta = {delta}; it must be at most delta/2"
        ));
    }
    Lattice::covering(all_coords, dim, grid.pad.unwrap_or(3.0 * h), spacing)
}

/// (δ,c)-interior support of the uniform-weight KDE of one point set.
pub fn interior_support(
    points: &[f64],
    dim: usize,
    cfg: &KdeConfig,
    delta: f64,
    c: f64,
    grid: &GridSpec,
) -> Result<SupportMask> {
    check_delta_c(delta, c)?;
    let wp = WeightedPoints::uniform(dim, points.to_vec());
    let h = bandwidth(cfg, &wp)?;
    let lattice = resolve_lattice(points, dim, h, delta, grid)?;
    let dens = density_on(&lattice, &wp, h);
    let members = vec![erode(&lattice, &dens, delta, c)];
    Ok(SupportMask { lattice, members, delta, c, bandwidth: h })
}

/// Supports of every group on one shared lattice. With a Silverman
/// configuration the bandwidth is resolved on the pooled particles.
pub fn group_supports(
    particles: &ParticleSet,
    cfg: &KdeConfig,
    delta: f64,
    c: f64,
    grid: &GridSpec,
) -> Result<SupportMask> {
    check_delta_c(delta, c)?;
    let dim = particles.dim();
    let all = particles.all_coords();
    let h = bandwidth(cfg, &WeightedPoints::uniform(dim, all.clone()))?;
    let lattice = resolve_lattice(&all, dim, h, delta, grid)?;
    let members = (0..particles.k())
        .map(|k| {
            let wp = WeightedPoints::uniform(dim, particles.group(k).to_vec());
            erode(&lattice, &density_on(&lattice, &wp, h), delta, c)
        })
        .collect();
    Ok(SupportMask { lattice, members, delta, c, bandwidth: h })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisjointnessReport {
    /// True when no lattice node lies in two supports.
    pub disjoint: bool,
    /// Nodes in ≥ 2 supports over nodes in ≥ 1 support (0 if none).
    pub overlap_fraction: f64,
    pub nodes_in_any: usize,
    pub nodes_in_several: usize,
}

impl DisjointnessReport {
    /// Whether the overlap is within `tolerance`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.overlap_fraction <= tolerance
    }
}

fn disjointness_from(mask: &SupportMask) -> DisjointnessReport {
    let mut any = 0;
    let mut several = 0;
    for idx in 0..mask.lattice.len() {
        let c = mask.members.iter().filter(|m| m[idx]).count();
        if c >= 1 {
            any += 1;
        }
        if c >= 2 {
            several += 1;
        }
    }
    DisjointnessReport {
        disjoint: several == 0,
        overlap_fraction: if any == 0 { 0.0 } else { several as f64 / any as f64 },
        nodes_in_any: any,
        nodes_in_several: several,
    }
}

/// Pairwise disjointness of the groups' (δ,c)-interior supports.
pub fn disjointness_check(
    state: &DecompositionState,
    delta: f64,
    c: f64,
    cfg: &KdeConfig,
    grid: &GridSpec,
) -> Result<DisjointnessReport> {
    if state.k() < 2 {
        return config("disjointness needs at least two groups");
    }
    Ok(disjointness_from(&group_supports(&state.particles, cfg, delta, c, grid)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Group whose support supplies the segment end points.
    pub group: usize,
    /// Group whose support the segment passes through.
    pub other: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexReport {
    pub holds: bool,
    pub violation_count: usize,
    /// At most the first 32 violations found.
    pub violations: Vec<Violation>,
}

fn convex_from(mask: &SupportMask, n_segments: usize, seed: u64) -> ConvexReport {
    let k = mask.members.len();
    let mut rng = rng_from_seed(seed);
    let mut violations = Vec::new();
    let mut count = 0;
    let step = mask.lattice.spacing / 2.0;
    for g in 0..k {
        let nodes: Vec<usize> = (0..mask.lattice.len()).filter(|&i| mask.members[g][i]).collect();
        if nodes.len() < 2 {
            continue;
        }
        for _ in 0..n_segments {
            let a = mask.lattice.point(nodes[rng.random_range(0..nodes.len())]);
            let b = mask.lattice.point(nodes[rng.random_range(0..nodes.len())]);
            let len: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let pieces = (len / step).ceil().max(1.0) as usize;
            'segment: for s in 1..pieces {
                let t = s as f64 / pieces as f64;
                let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + t * (q - p)).collect();
                let Some(idx) = mask.lattice.nearest(&x) else { continue };
                for other in (0..k).filter(|&o| o != g) {
                    if mask.members[other][idx] {
                        count += 1;
                        if violations.len() < 32 {
                            violations.push(Violation { group: g, other, a: a.clone(), b: b.clone(), point: x });
                        }
                        break 'segment;
                    }
                }
            }
        }
    }
    ConvexReport { holds: count == 0, violation_count: count, violations }
}

/// Samples `n_segments` segments between support nodes of each group and
/// reports segments that pass through another group's support.
pub fn convex_in_pairs_check(
    state: &DecompositionState,
    delta: f64,
    c: f64,
    cfg: &KdeConfig,
    grid: &GridSpec,
    n_segments: usize,
    seed: u64,
) -> Result<ConvexReport> {
    if state.k() < 2 {
        return Ok(ConvexReport { holds: true, violation_count: 0, violations: Vec::new() });
    }
    let mask = group_supports(&state.particles, cfg, delta, c, grid)?;
    Ok(convex_from(&mask, n_segments, seed))
}

/// Both structural checks from one lattice evaluation.
pub fn structure_report(
    state: &DecompositionState,
    delta: f64,
    c: f64,
    cfg: &KdeConfig,
    grid: &GridSpec,
    n_segments: usize,
    seed: u64,
) -> Result<(SupportMask, DisjointnessReport, ConvexReport)> {
    let mask = group_supports(&state.particles, cfg, delta, c, grid)?;
    let disj = disjointness_from(&mask);
    let conv = if state.k() < 2 {
        ConvexReport { holds: true, violation_count: 0, violations: Vec::new() }
    } else {
        convex_from(&mask, n_segments, seed)
    };
    Ok((mask, disj, conv))
}

/// δ = 0.1 × (smallest per-axis standard deviation of the pooled particles).
pub fn default_delta(particles: &ParticleSet) -> f64 {
    let d = particles.dim();
    let all = particles.all_coords();
    let n = (all.len() / d) as f64;
    (0..d)
        .map(|j| {
            let mean = all.iter().skip(j).step_by(d).sum::<f64>() / n;
            let var = all.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
        * 0.1
}

/// Σ p_k L̂(μ_k), plus Σ θ/p_k^β in dynamic mode.
pub fn objective(state: &DecompositionState, kern: &KernelSpec, mode: FlowMode, theta: f64, beta: f64) -> Result<f64> {
    let ps = &state.particles;
    let mut total = 0.0;
    for (k, p) in state.weights.as_slice().iter().enumerate() {
        total += p * loss_estimate(kern, ps.group(k), ps.dim())?;
    }
    if mode == FlowMode::DynamicWeights {
        total += state.weights.as_slice().iter().map(|p| theta / p.powf(beta)).sum::<f64>();
    }
    Ok(total)
}

/// w(x) = mean_j x / (x + y_j) at every grid skill.
pub fn win_rate_curve(opponents: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if opponents.is_empty() {
        return config("win rates need at least one opponent");
    }
    if let Some(v) = opponents.iter().chain(grid).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(DecompError::Domain(format!("skills must be positive, got {v}")));
    }
    let n = opponents.len() as f64;
    Ok(grid.iter().map(|&x| opponents.iter().map(|y| x / (x + y)).sum::<f64>() / n).collect())
}

fn sorted_rows(samples: &[f64], dim: usize, axis: usize) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = samples.chunks_exact(dim).collect();
    rows.sort_by(|a, b| a[axis].total_cmp(&b[axis]));
    rows
}

/// Sorts along `axis` and cuts into K contiguous equal-count groups (the
/// remainder after trimming to a multiple of K is dropped from the top).
pub fn baseline_parallel_slices(samples: &[f64], dim: usize, k: usize, axis: usize) -> Result<DecompositionState> {
    if k == 0 || axis >= dim {
        return config(format!("slices need K >= 1 and axis < d (K = {k}, axis = {axis})"));
    }
    let n = samples.len() / dim / k;
    if n == 0 {
        return config("fewer samples than groups");
    }
    let rows = sorted_rows(samples, dim, axis);
    let groups = (0..k).map(|g| rows[g * n..(g + 1) * n].concat()).collect();
    DecompositionState::new(ParticleSet::new(dim, groups)?, WeightVector::equal(k), 0)
}

/// A two-league split at an empirical quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSplit {
    pub state: DecompositionState,
    /// Midpoint between the last lower and first upper sample.
    pub boundary: f64,
}

/// Lower w₁-quantile league (weight w₁) and upper league (weight 1 − w₁).
///
/// Groups must hold equally many particles, so each league is represented by
/// `min(lower, upper)` evenly spaced order statistics of its own samples.
pub fn baseline_quantile_split(samples: &[f64], w1: f64) -> Result<QuantileSplit> {
    if !(w1 > 0.0 && w1 < 1.0) {
        return config(format!("quantile weight must lie in (0, 1), got {w1}"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = (w1 * s.len() as f64).round() as usize;
    if m == 0 || m == s.len() {
        return config("not enough samples for this quantile split");
    }
    let (lower, upper) = s.split_at(m);
    let n = lower.len().min(upper.len());
    let pick = |v: &[f64]| -> Vec<f64> {
        (0..n).map(|i| v[((i as f64 + 0.5) * v.len() as f64 / n as f64) as usize]).collect()
    };
    let particles = ParticleSet::new(1, vec![pick(lower), pick(upper)])?;
    let state = DecompositionState::new(particles, WeightVector::new(vec![w1, 1.0 - w1], 0.0)?, 0)?;
    Ok(QuantileSplit { state, boundary: 0.5 * (lower[m - 1] + upper[0]) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    /// `allocation[k][j]` is the mass μ_k puts on atom j.
    pub allocation: Vec<Vec<f64>>,
    pub objective: f64,
    pub candidates: usize,
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    // Lexicographic order starting from (0, …, 0, total).
    fn rec(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=total {
            prefix.push(v);
            rec(total - v, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search over grid allocations of atom masses to K components
/// subject to Σ_k p_k μ_k = π. The first strict minimum in enumeration order
/// is returned.
pub fn brute_force_discrete(
    masses: &[(f64, f64)],
    k: usize,
    weights: &[f64],
    kern: &KernelSpec,
    grid_step: f64,
) -> Result<BruteForceResult> {
    let atoms = masses.len();
    if atoms == 0 || atoms > 5 || k == 0 || k > 3 || weights.len() != k {
        return config("brute force supports 1..=5 atoms, 1..=3 components and one weight per component");
    }
    let units = (1.0 / grid_step).round();
    if !(grid_step > 0.0) || (units * grid_step - 1.0).abs() > 1e-9 {
        return config(format!("grid step {grid_step} must divide 1"));
    }
    let units = units as usize;
    let wv = WeightVector::new(weights.to_vec(), 0.0)?;
    let p = wv.as_slice();
    let ell: Vec<Vec<f64>> = masses
        .iter()
        .map(|(a, _)| masses.iter().map(|(b, _)| kernel_eval(kern, &[*a], &[*b])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let loss = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..atoms {
            for j in 0..atoms {
                s += m[i] * m[j] * ell[i][j];
            }
        }
        s
    };
    let comps = compositions(units, atoms);
    let free = k - 1;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut candidates = 0usize;
    let mut idx = vec![0usize; free];
    loop {
        let mut alloc: Vec<Vec<f64>> =
            idx.iter().map(|&c| comps[c].iter().map(|&u| u as f64 * grid_step).collect()).collect();
        let last: Vec<f64> = (0..atoms)
            .map(|j| (masses[j].1 - (0..free).map(|g| p[g] * alloc[g][j]).sum::<f64>()) / p[k - 1])
            .collect();
        if last.iter().all(|v| *v >= -1e-12) {
            alloc.push(last.iter().map(|v| v.max(0.0)).collect());
            candidates += 1;
            let obj: f64 = (0..k).map(|g| p[g] * loss(&alloc[g])).sum();
            if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-14) {
                best = Some((obj, alloc));
            }
        }
        // Advance the odometer over the free components.
        let mut j = free;
        loop {
            if j == 0 {
                let Some((objective, allocation)) = best else {
                    return config("no feasible allocation exists on this grid");
                };
                return Ok(BruteForceResult { allocation, objective, candidates });
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < comps.len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

//! Coupled loss kernels ℓ(x, y), the empirical loss L̂ and its Wasserstein
//! gradient ∇L(μ)(x) = ∫ (∇₁ℓ(x,z) + ∇₂ℓ(z,x)) dμ(z).

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{config, DecompError, Result};

/// A user-supplied kernel with both partial gradients.
pub trait CoupledKernel: Send + Sync {
    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64>;
    /// Returns (∇ₓℓ(x,y), ∇ᵧℓ(x,y)).
    fn grad(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

#[derive(Clone)]
pub enum KernelSpec {
    /// ℓ(x,y) = ½(x²+y²)/(x+y)² − ¼ on the positive half-line.
    Elo,
    /// ℓ(x,y) = (x−y)ᵀW(x−y) with symmetric W (row-major rows).
    Variance { w: Vec<Vec<f64>> },
    Custom(Arc<dyn CoupledKernel>),
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Elo => write!(f, "Elo"),
            KernelSpec::Variance { w } => f.debug_struct("Variance").field("w", w).finish(),
            KernelSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl KernelSpec {
    pub fn variance(w: Vec<Vec<f64>>) -> Result<Self> {
        let k = KernelSpec::Variance { w };
        k.validate(None)?;
        Ok(k)
    }

    /// Variance kernel with a diagonal weight matrix.
    pub fn variance_diag(diag: &[f64]) -> Result<Self> {
        let d = diag.len();
        Self::variance((0..d).map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect())
    }

    /// Checks internal invariants and, when `dim` is given, compatibility
    /// with the data dimension.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        match self {
            KernelSpec::Elo => {
                if let Some(d) = dim {
                    if d != 1 {
                        return config(format!("the elo kernel needs d = 1, got d = {d}"));
                    }
                }
            }
            KernelSpec::Variance { w } => {
                let d = w.len();
                if d == 0 || w.iter().any(|r| r.len() != d) {
                    return config("variance weight matrix W must be square and non-empty");
                }
                if w.iter().flatten().any(|v| !v.is_finite()) {
                    return config("variance weight matrix W must be finite");
                }
                for i in 0..d {
                    for j in 0..i {
                        if w[i][j] != w[j][i] {
                            return config("variance weight matrix W must be symmetric");
                        }
                    }
                }
                if let Some(dd) = dim {
                    if dd != d {
                        return config(format!("W is {d}x{d} but the data has d = {dd}"));
                    }
                }
            }
            KernelSpec::Custom(_) => {}
        }
        Ok(())
    }
}

fn elo_domain(x: f64, y: f64) -> Result<()> {
    if x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite() {
        Ok(())
    } else {
        Err(DecompError::Domain(format!(
            "elo kernel needs strictly positive skills, got ({x}, {y})"
        )))
    }
}

fn matvec(w: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(DecompError::Domain(format!(
            "points of dimension {} and {} cannot be paired",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn kernel_eval(kern: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    match kern {
        KernelSpec::Elo => {
            let (a, b) = (x[0], y[0]);
            elo_domain(a, b)?;
            let s = a + b;
            Ok(0.5 * (a * a + b * b) / (s * s) - 0.25)
        }
        KernelSpec::Variance { w } => {
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            Ok(diff.iter().zip(matvec(w, &diff)).map(|(a, b)| a * b).sum())
        }
        KernelSpec::Custom(c) => c.eval(x, y),
    }
}

/// Partial gradients (∇₁ℓ(x,y), ∇₂ℓ(x,y)).
pub fn kernel_grad(kern: &KernelSpec, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(x, y)?;
    match kern {
        KernelSpec::Elo => {
            let (a, b) = (x[0], y[0]);
            elo_domain(a, b)?;
            let s3 = (a + b).powi(3);
            Ok((vec![(a * b - b * b) / s3], vec![(a * b - a * a) / s3]))
        }
        KernelSpec::Variance { w } => {
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let g: Vec<f64> = matvec(w, &diff).into_iter().map(|v| 2.0 * v).collect();
            let neg = g.iter().map(|v| -v).collect();
            Ok((g, neg))
        }
        KernelSpec::Custom(c) => c.grad(x, y),
    }
}

fn mean_and_cov(points: &[f64], dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = (points.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; dim]; dim];
    for p in points.chunks_exact(dim) {
        for a in 0..dim {
            for b in 0..dim {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n);
    (mean, cov)
}

/// L̂ = (1/N²) Σᵢ Σⱼ ℓ(xᵢ, xⱼ), diagonal included. `points` is flat row-major.
///
/// The variance kernel uses the identity L̂ = 2·tr(W Ĉ) with Ĉ the
/// (1/N-normalized) empirical covariance.
pub fn loss_estimate(kern: &KernelSpec, points: &[f64], dim: usize) -> Result<f64> {
    let n = points.len() / dim;
    if n == 0 {
        return config("loss_estimate needs at least one point");
    }
    match kern {
        KernelSpec::Variance { w } => {
            let (_, cov) = mean_and_cov(points, dim);
            let mut tr = 0.0;
            for a in 0..dim {
                for b in 0..dim {
                    tr += w[a][b] * cov[b][a];
                }
            }
            Ok(2.0 * tr)
        }
        _ => {
            let rows: Vec<f64> = points
                .par_chunks_exact(dim)
                .map(|x| {
                    points
                        .chunks_exact(dim)
                        .map(|y| kernel_eval(kern, x, y))
                        .sum::<Result<f64>>()
                })
                .collect::<Result<_>>()?;
            Ok(rows.iter().sum::<f64>() / (n * n) as f64)
        }
    }
}

/// Monte-Carlo Wasserstein gradient of L at `x` against the empirical measure
/// on `points`.
pub fn grad_l_at(kern: &KernelSpec, points: &[f64], dim: usize, x: &[f64]) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if n == 0 {
        return config("grad_l_at needs at least one point");
    }
    match kern {
        KernelSpec::Variance { w } => {
            let (mean, _) = mean_and_cov(points, dim);
            let diff: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            Ok(matvec(w, &diff).into_iter().map(|v| 4.0 * v).collect())
        }
        _ => {
            let mut g = vec![0.0; dim];
            for z in points.chunks_exact(dim) {
                let (g1, _) = kernel_grad(kern, x, z)?;
                let (_, g2) = kernel_grad(kern, z, x)?;
                for j in 0..dim {
                    g[j] += g1[j] + g2[j];
                }
            }
            g.iter_mut().for_each(|v| *v /= n as f64);
            Ok(g)
        }
    }
}

/// ∇L(μ̂)(xᵢ) for every particle of the group, flat row-major.
pub fn grad_l_all(kern: &KernelSpec, points: &[f64], dim: usize) -> Result<Vec<f64>> {
    if let KernelSpec::Variance { w } = kern {
        let (mean, _) = mean_and_cov(points, dim);
        let mut out = Vec::with_capacity(points.len());
        for x in points.chunks_exact(dim) {
            let diff: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            out.extend(matvec(w, &diff).into_iter().map(|v| 4.0 * v));
        }
        return Ok(out);
    }
    let rows: Vec<Vec<f64>> = points
        .par_chunks_exact(dim)
        .map(|x| grad_l_at(kern, points, dim, x))
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

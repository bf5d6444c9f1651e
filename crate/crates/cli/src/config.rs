//! The run configuration: `[section]` headers with `key = value` lines
//! (TOML syntax), one canonical schema documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use msdecomp::density::{Bandwidth, KdeConfig};
use msdecomp::ensemble::{ParticleInit, WeightInit};
use msdecomp::kernels::KernelSpec;
use msdecomp::targets::TargetSpec;
use msdecomp::wflow::{FlowConfig, FlowMode, PositivityGuard, ScoreEstimator};
use msdecomp::{DecompError, Result};

fn bad(msg: impl Into<String>) -> DecompError {
    DecompError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub loss: LossSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub density: DensitySection,
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Elo,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kernel: KernelKind,
    /// Full symmetric W for the variance kernel.
    #[serde(default)]
    pub w: Option<Vec<Vec<f64>>>,
    /// Diagonal of W for the variance kernel.
    #[serde(default)]
    pub w_diag: Option<Vec<f64>>,
}

impl LossSection {
    pub fn kernel(&self, dim: usize) -> Result<KernelSpec> {
        let k = match (self.kernel, &self.w, &self.w_diag) {
            (KernelKind::Elo, None, None) => KernelSpec::Elo,
            (KernelKind::Elo, _, _) => return Err(bad("loss.w / loss.w_diag are only valid for the variance kernel")),
            (KernelKind::Variance, Some(_), Some(_)) => {
                return Err(bad("give either loss.w or loss.w_diag, not both"))
            }
            (KernelKind::Variance, Some(w), None) => KernelSpec::variance(w.clone())?,
            (KernelKind::Variance, None, Some(d)) => KernelSpec::variance_diag(d)?,
            (KernelKind::Variance, None, None) => KernelSpec::variance_diag(&vec![1.0; dim])?,
        };
        k.validate(Some(dim))?;
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub alpha: f64,
    /// Particle step; defaults to 0.05 × (smallest per-axis variance of the
    /// initial pooled particles).
    pub eta: Option<f64>,
    /// Weight step; defaults to 0.1 × eta.
    pub eta2: Option<f64>,
    pub iterations: usize,
    pub mode: FlowMode,
    pub theta: f64,
    pub beta: f64,
    pub denom_floor: f64,
    pub p_floor: f64,
    pub positivity_guard: PositivityGuard,
    pub score: ScoreEstimator,
}

impl Default for FlowSection {
    fn default() -> Self {
        let d = FlowConfig::default();
        Self {
            alpha: d.alpha,
            eta: None,
            eta2: None,
            iterations: d.iterations,
            mode: d.mode,
            theta: d.theta,
            beta: d.beta,
            denom_floor: d.denom_floor,
            p_floor: d.p_floor,
            positivity_guard: d.positivity_guard,
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthField {
    Fixed(f64),
    Rule(String),
}

impl BandwidthField {
    pub fn resolve(&self, field: &str) -> Result<Bandwidth> {
        match self {
            BandwidthField::Fixed(h) if *h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(*h)),
            BandwidthField::Fixed(h) => Err(bad(format!("{field} must be positive, got {h}"))),
            BandwidthField::Rule(s) if s == "silverman" => Ok(Bandwidth::Silverman),
            BandwidthField::Rule(s) => Err(bad(format!("{field} must be a number or \"silverman\", got \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub bandwidth: BandwidthField,
    pub dimension_free_constant: bool,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self { bandwidth: BandwidthField::Rule("silverman".into()), dimension_free_constant: false }
    }
}

impl DensitySection {
    pub fn kde(&self) -> Result<KdeConfig> {
        Ok(KdeConfig { bandwidth: self.bandwidth.resolve("density.bandwidth")?, dimension_free_constant: self.dimension_free_constant })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsField {
    Explicit(Vec<f64>),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Target,
    Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "equal_weights")]
    pub weights: WeightsField,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    #[serde(default)]
    pub log_scale: bool,
}

fn equal_weights() -> WeightsField {
    WeightsField::Named("equal".into())
}

impl EnsembleSection {
    pub fn weight_init(&self) -> Result<WeightInit> {
        match &self.weights {
            WeightsField::Named(s) if s == "equal" => Ok(WeightInit::Equal),
            WeightsField::Named(s) => Err(bad(format!("ensemble.weights must be \"equal\" or a list, got \"{s}\""))),
            WeightsField::Explicit(p) => Ok(WeightInit::Explicit(p.clone())),
        }
    }

    pub fn particle_init(&self) -> Result<ParticleInit> {
        match self.init {
            InitKind::Target => {
                if self.centers.is_some() || self.scales.is_some() {
                    return Err(bad("ensemble.centers / ensemble.scales need init = \"offset\""));
                }
                Ok(ParticleInit::Target)
            }
            InitKind::Offset => match (&self.centers, &self.scales) {
                (Some(c), Some(s)) => Ok(ParticleInit::Offset {
                    centers: c.clone(),
                    scales: s.clone(),
                    log_scale: self.log_scale,
                }),
                _ => Err(bad("init = \"offset\" needs ensemble.centers and ensemble.scales")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory; defaults to `runs/<config file stem>`.
    pub dir: Option<PathBuf>,
    /// Snapshot cadence in iterations (0: final snapshot only).
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Defaults to 0.1 × (smallest per-axis std of the pooled particles).
    pub delta: Option<f64>,
    pub c: f64,
    /// KDE bandwidth of the per-group densities; defaults to delta.
    pub bandwidth: Option<BandwidthField>,
    /// Lattice spacing; defaults to delta / 2.
    pub grid: Option<f64>,
    pub n_segments: usize,
    /// Seed of the segment sampler; defaults to the ensemble seed.
    pub seed: Option<u64>,
    /// Skill-grid size of win-rate curves.
    pub winrate_points: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { delta: None, c: 1e-4, bandwidth: None, grid: None, n_segments: 200, seed: None, winrate_points: 200 }
    }
}

impl DiagnosticsSection {
    pub fn kde(&self, delta: f64) -> Result<KdeConfig> {
        let bandwidth = match &self.bandwidth {
            None => Bandwidth::Fixed(delta),
            Some(b) => b.resolve("diagnostics.bandwidth")?,
        };
        Ok(KdeConfig { bandwidth, dimension_free_constant: false })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Checks every section; messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        let dim = self.target.dim();
        self.loss.kernel(dim)?;
        if self.ensemble.k == 0 || self.ensemble.n == 0 {
            return Err(bad("ensemble.k and ensemble.n must be at least 1"));
        }
        self.ensemble.weight_init()?.build(self.ensemble.k, self.flow.p_floor.min(1.0 / self.ensemble.k as f64))?;
        self.ensemble.particle_init()?;
        self.density.kde()?;
        for (name, v) in [("flow.eta", self.flow.eta), ("flow.eta2", self.flow.eta2), ("diagnostics.delta", self.diagnostics.delta), ("diagnostics.grid", self.diagnostics.grid)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !(self.diagnostics.c > 0.0) {
            return Err(bad(format!("diagnostics.c must be positive, got {}", self.diagnostics.c)));
        }
        if let Some(b) = &self.diagnostics.bandwidth {
            b.resolve("diagnostics.bandwidth")?;
        }
        self.flow_config(1.0)?.validate()
    }

    /// The flow configuration, with `default_eta` used when `flow.eta` is unset.
    pub fn flow_config(&self, default_eta: f64) -> Result<FlowConfig> {
        let f = &self.flow;
        let eta = f.eta.unwrap_or(default_eta);
        Ok(FlowConfig {
            alpha: f.alpha,
            eta,
            eta2: f.eta2.unwrap_or(0.1 * eta),
            iterations: f.iterations,
            mode: f.mode,
            theta: f.theta,
            beta: f.beta,
            denom_floor: f.denom_floor,
            p_floor: f.p_floor,
            kde: self.density.kde()?,
            positivity_guard: f.positivity_guard,
            score: f.score,
            snapshot_every: self.output.snapshot_every,
        })
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        self.loss.kernel(self.target.dim())
    }
}

//! The subcommands: run orchestration, persistence, comparison against
//! baselines, snapshot diagnostics, plot-data emission and Euclidean runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use msdecomp::diagnostics::{
    baseline_parallel_slices, baseline_quantile_split, default_delta, objective, structure_report,
    win_rate_curve, ConvexReport, DisjointnessReport, GridSpec, SupportMask,
};
use msdecomp::ensemble::{init_state, read_snapshot, DecompositionState, ParticleSet, WeightVector, RNG_NAME};
use msdecomp::euclid_ccgf::{builtin_problem, integrate, residual_bound_constant, EuclidFlowConfig};
use msdecomp::kernels::{loss_estimate, KernelSpec};
use msdecomp::wflow::{run_from_state, FlowMode, RunRecord};
use msdecomp::{DecompError, Result};

use crate::config::RunConfig;

/// Process exit code for an error: 2 for configuration, I/O and parse
/// problems, 3 for numerical, domain and assumption failures.
pub fn exit_code(e: &DecompError) -> u8 {
    match e {
        DecompError::Config(_) | DecompError::Io(_) | DecompError::Parse(_) => 2,
        DecompError::Numerical(_) | DecompError::Domain(_) | DecompError::Assumption(_) => 3,
    }
}

fn missing(what: &str, dir: &Path) -> DecompError {
    DecompError::Config(format!("{what} not found in {}", dir.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| DecompError::Parse(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

fn snapshot_name(t: usize) -> String {
    format!("particles_{t:04}.csv")
}

/// Weighted loss Σ p_k L̂(μ_k) and weight loss Σ θ/p_k^β of a state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveParts {
    pub objective: f64,
    pub weighted_loss: f64,
    pub weight_loss: f64,
    pub group_losses: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn objective_parts(
    state: &DecompositionState,
    kern: &KernelSpec,
    mode: FlowMode,
    theta: f64,
    beta: f64,
) -> Result<ObjectiveParts> {
    let ps = &state.particles;
    let group_losses = (0..ps.k())
        .map(|k| loss_estimate(kern, ps.group(k), ps.dim()))
        .collect::<Result<Vec<_>>>()?;
    let p = state.weights.as_slice();
    let weighted_loss = p.iter().zip(&group_losses).map(|(a, b)| a * b).sum();
    let weight_loss = match mode {
        FlowMode::FixedWeights => 0.0,
        FlowMode::DynamicWeights => p.iter().map(|q| theta / q.powf(beta)).sum(),
    };
    Ok(ObjectiveParts {
        objective: objective(state, kern, mode, theta, beta)?,
        weighted_loss,
        weight_loss,
        group_losses,
        weights: p.to_vec(),
    })
}

/// Structural checks at the configured (δ, c).
#[derive(Debug, Clone, Serialize)]
pub struct StructureSummary {
    pub delta: f64,
    pub c: f64,
    pub bandwidth: f64,
    pub lattice_shape: Vec<usize>,
    pub support_counts: Vec<usize>,
    pub disjointness: Option<DisjointnessReport>,
    pub convex_in_pairs: ConvexReport,
}

fn structure_summary(cfg: &RunConfig, state: &DecompositionState, delta: Option<f64>) -> Result<(StructureSummary, SupportMask)> {
    let d = &cfg.diagnostics;
    let delta = delta.or(d.delta).unwrap_or_else(|| default_delta(&state.particles));
    let grid = GridSpec { spacing: d.grid, pad: None };
    let seed = d.seed.unwrap_or(cfg.ensemble.seed);
    let (mask, disj, conv) = structure_report(state, delta, d.c, &d.kde(delta)?, &grid, d.n_segments, seed)?;
    let summary = StructureSummary {
        delta,
        c: d.c,
        bandwidth: mask.bandwidth,
        lattice_shape: mask.lattice.shape.clone(),
        support_counts: (0..state.k()).map(|k| mask.count(k)).collect(),
        disjointness: (state.k() >= 2).then_some(disj),
        convex_in_pairs: conv,
    };
    Ok((summary, mask))
}

/// What `run` produced.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub report: Value,
}

fn default_eta(state: &DecompositionState) -> f64 {
    let sd = default_delta(&state.particles) * 10.0;
    0.05 * sd * sd
}

/// Executes a configured run and writes `trace.csv`, `particles_XXXX.csv`,
/// `meta.json` and `report.json` into the run directory.
///
/// A mid-run numerical failure still writes every artifact; the outcome's
/// record then carries the failure.
pub fn cmd_run(config_path: &Path, out_override: Option<&Path>) -> Result<RunOutcome> {
    let (cfg, text) = RunConfig::load(config_path)?;
    let dir = match (out_override, &cfg.output.dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            let stem = config_path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            PathBuf::from("runs").join(stem)
        }
    };
    let kern = cfg.kernel()?;
    let e = &cfg.ensemble;
    let p_floor = cfg.flow.p_floor;
    let state = init_state(&cfg.target, e.k, e.n, e.seed, &e.weight_init()?, &e.particle_init()?, p_floor)?;
    let flow = cfg.flow_config(default_eta(&state))?;
    let record = run_from_state(state, &kern, &cfg.target, &flow)?;

    fs::create_dir_all(&dir)?;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("particles_") && name.ends_with(".csv") {
            fs::remove_file(&path)?;
        }
    }
    fs::write(dir.join("trace.csv"), record.trace_csv())?;
    for i in 0..record.snapshots.len() {
        fs::write(dir.join(snapshot_name(record.snapshots[i].0)), record.snapshot_csv(i)?)?;
    }
    let guard = flow.positivity_guard.resolve(&kern, &cfg.target);
    let meta = json!({
        "config": cfg,
        "config_text": text,
        "seed": e.seed,
        "rng": RNG_NAME,
        "versions": { "msdecomp": msdecomp::VERSION, "msdecomp-cli": env!("CARGO_PKG_VERSION") },
        "resolved": {
            "eta": flow.eta,
            "eta2": flow.eta2,
            "positivity_guard": guard,
            "kde": flow.kde,
        },
        "initialization": match cfg.ensemble.init {
            crate::config::InitKind::Target => "every group i.i.d. from the target",
            crate::config::InitKind::Offset => "per-group offset Gaussians",
        },
        "k": e.k,
        "n": e.n,
        "dim": cfg.target.dim(),
        "iterations_completed": record.final_state.iteration,
        "failure": record.failure,
    });
    write_json(&dir.join("meta.json"), &meta)?;

    let fs_ = &record.final_state;
    let parts = objective_parts(fs_, &kern, flow.mode, flow.theta, flow.beta)?;
    let structure = match structure_summary(&cfg, fs_, None) {
        Ok((s, _)) => serde_json::to_value(s).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let running_min: Vec<f64> = record
        .phi_norm
        .iter()
        .scan(f64::INFINITY, |m, v| {
            *m = m.min(*v);
            Some(*m)
        })
        .collect();
    let report = json!({
        "iterations_completed": fs_.iteration,
        "failure": record.failure,
        "initial": { "kl": record.kl.first(), "objective": record.objective.first(), "phi_norm": record.phi_norm.first() },
        "final": {
            "kl": record.kl.last(),
            "objective": parts.objective,
            "weighted_loss": parts.weighted_loss,
            "weight_loss": parts.weight_loss,
            "group_losses": parts.group_losses,
            "weights": parts.weights,
            "bandwidth": record.bandwidth.last(),
            "phi_norm": record.phi_norm.last(),
            "phi_norm_running_min": running_min.last(),
        },
        "structure": structure,
    });
    write_json(&dir.join("report.json"), &report)?;
    Ok(RunOutcome { dir, record, report })
}

/// A finished run read back from disk.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub trace_header: Vec<String>,
    pub trace: Vec<Vec<f64>>,
    /// (t, path) of every snapshot, sorted by t.
    pub snapshots: Vec<(usize, PathBuf)>,
}

fn parse_trace(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DecompError::Parse(e.to_string()))?;
    let header = rdr.headers().map_err(|e| DecompError::Parse(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DecompError::Parse(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|e| DecompError::Parse(format!("trace value {v}: {e}"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

fn list_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(t) = name.strip_prefix("particles_").and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(t) = t.parse::<usize>() {
                out.push((t, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn config_from_meta(meta_path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(meta_path)?;
    let meta: Value = serde_json::from_str(&text).map_err(|e| DecompError::Parse(e.to_string()))?;
    let cfg_text = meta["config_text"]
        .as_str()
        .ok_or_else(|| DecompError::Parse(format!("{} has no config_text", meta_path.display())))?;
    RunConfig::parse(cfg_text)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let meta = dir.join("meta.json");
    if !meta.is_file() {
        return Err(missing("meta.json", dir));
    }
    let trace_path = dir.join("trace.csv");
    if !trace_path.is_file() {
        return Err(missing("trace.csv", dir));
    }
    let (trace_header, trace) = parse_trace(&trace_path)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config: config_from_meta(&meta)?,
        trace_header,
        trace,
        snapshots: list_snapshots(dir)?,
    })
}

impl LoadedRun {
    /// Weights recorded in the trace row for iteration `t` (last row if absent).
    pub fn weights_at(&self, t: usize) -> Result<Vec<f64>> {
        let first = self.trace_header.iter().position(|h| h.starts_with("p_")).ok_or_else(|| missing("weight columns", &self.dir))?;
        let row = self
            .trace
            .iter()
            .find(|r| r[0] as usize == t)
            .or(self.trace.last())
            .ok_or_else(|| missing("trace rows", &self.dir))?;
        Ok(row[first..].to_vec())
    }

    pub fn final_state(&self) -> Result<DecompositionState> {
        let (t, path) = self.snapshots.last().ok_or_else(|| missing("particle snapshots", &self.dir))?;
        let (_, particles) = read_snapshot(fs::File::open(path)?)?;
        let weights = WeightVector::new(self.weights_at(*t)?, 0.0)?;
        let mut state = DecompositionState::new(particles, weights, self.config.ensemble.seed)?;
        state.iteration = *t;
        Ok(state)
    }

    pub fn objective_parts(&self) -> Result<ObjectiveParts> {
        let f = &self.config.flow;
        objective_parts(&self.final_state()?, &self.config.kernel()?, f.mode, f.theta, f.beta)
    }
}

/// Reference decompositions a run can be compared against.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Equal-count slices of fresh target samples along `axis`.
    Slices { axis: usize },
    /// Lower w₁-quantile league against the rest (1-D targets).
    Quantile { w1: f64 },
    /// Everyone in one league.
    GrandLeague,
    /// Another completed run.
    Run(PathBuf),
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::Slices { axis } => format!("slices_axis{axis}"),
            Baseline::Quantile { w1 } => format!("quantile_{w1}"),
            Baseline::GrandLeague => "grand_league".into(),
            Baseline::Run(p) => format!("run:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub baseline: String,
    pub run: ObjectiveParts,
    pub reference: ObjectiveParts,
    pub run_objective: f64,
    pub baseline_objective: f64,
    /// (baseline − run) / baseline.
    pub improvement: f64,
    /// Quantile boundary, for the quantile baseline.
    pub boundary: Option<f64>,
    pub baseline_samples: usize,
}

/// Relative improvement (baseline − run) / baseline.
pub fn relative_improvement(run: f64, baseline: f64) -> f64 {
    (baseline - run) / baseline
}

/// Compares a completed run with a baseline decomposition built from
/// `samples` fresh target draws (seeded by the run seed + 1). The report is
/// also written to `compare_<baseline>.json` in the run directory.
pub fn cmd_compare(run_dir: &Path, baseline: &Baseline, samples: usize) -> Result<CompareReport> {
    let run = load_run(run_dir)?;
    let cfg = &run.config;
    let kern = cfg.kernel()?;
    let (mode, theta, beta) = (cfg.flow.mode, cfg.flow.theta, cfg.flow.beta);
    let ours = run.objective_parts()?;
    let k = cfg.ensemble.k;
    let dim = cfg.target.dim();
    let draw = |m: usize| cfg.target.sample_seeded(m, cfg.ensemble.seed.wrapping_add(1));
    let mut boundary = None;
    let mut used = samples;
    let reference = match baseline {
        Baseline::Slices { axis } => {
            used = samples / k * k;
            objective_parts(&baseline_parallel_slices(&draw(used), dim, k, *axis)?, &kern, mode, theta, beta)?
        }
        Baseline::Quantile { w1 } => {
            if dim != 1 {
                return Err(DecompError::Config("the quantile baseline needs a 1-D target".into()));
            }
            let split = baseline_quantile_split(&draw(samples), *w1)?;
            boundary = Some(split.boundary);
            objective_parts(&split.state, &kern, mode, theta, beta)?
        }
        Baseline::GrandLeague => {
            let state = DecompositionState::new(ParticleSet::new(dim, vec![draw(samples)])?, WeightVector::equal(1), 0)?;
            objective_parts(&state, &kern, mode, theta, beta)?
        }
        Baseline::Run(other) => {
            used = 0;
            load_run(other)?.objective_parts()?
        }
    };
    let report = CompareReport {
        baseline: baseline.name(),
        run_objective: ours.objective,
        baseline_objective: reference.objective,
        improvement: relative_improvement(ours.objective, reference.objective),
        run: ours,
        reference,
        boundary,
        baseline_samples: used,
    };
    let file = match baseline {
        Baseline::Run(_) => "compare_run.json".to_string(),
        b => format!("compare_{}.json", b.name()),
    };
    write_json(&run_dir.join(file), &report)?;
    Ok(report)
}

/// Win rates of every league on a skill grid spanning all particles, as
/// `x,grand_league,league_1..league_K`. League columns are left empty
/// outside the league's own skill range; the grand league is the
/// weight-averaged mixture of all leagues.
pub fn winrate_table(state: &DecompositionState, points: usize) -> Result<String> {
    let ps = &state.particles;
    if ps.dim() != 1 {
        return Err(DecompError::Config("win rates need 1-D skills".into()));
    }
    let all = ps.all_coords();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = points.max(2);
    let grid: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let curves = (0..ps.k()).map(|k| win_rate_curve(ps.group(k), &grid)).collect::<Result<Vec<_>>>()?;
    let p = state.weights.as_slice();
    let mut s = String::from("x,grand_league");
    for k in 1..=ps.k() {
        let _ = write!(s, ",league_{k}");
    }
    s.push('\n');
    for (i, x) in grid.iter().enumerate() {
        let grand: f64 = (0..ps.k()).map(|k| p[k] * curves[k][i]).sum();
        let _ = write!(s, "{x},{grand}");
        for (k, curve) in curves.iter().enumerate() {
            let g = ps.group(k);
            let (a, b) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            if *x >= a && *x <= b {
                let _ = write!(s, ",{}", curve[i]);
            } else {
                s.push(',');
            }
        }
        s.push('\n');
    }
    Ok(s)
}

fn scatter_csv(ps: &ParticleSet) -> String {
    let mut s = String::from("k");
    for j in 1..=ps.dim() {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for k in 0..ps.k() {
        for i in 0..ps.n() {
            let _ = write!(s, "{}", k + 1);
            for v in ps.point(k, i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

fn support_csv(mask: &SupportMask) -> String {
    let mut s = String::from("k");
    for j in 1..=mask.lattice.dim() {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (k, members) in mask.members.iter().enumerate() {
        for idx in (0..members.len()).filter(|&i| members[i]) {
            let _ = write!(s, "{}", k + 1);
            for v in mask.lattice.point(idx) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

/// Options of the `diagnose` subcommand.
#[derive(Debug, Clone, Default)]
pub struct DiagnoseOptions {
    /// Run configuration; defaults to the `meta.json` beside the snapshot.
    pub config: Option<PathBuf>,
    /// Group weights; default: the run trace at the snapshot's t, else equal.
    pub weights: Option<Vec<f64>>,
    /// Output directory; defaults to the snapshot's directory.
    pub out: Option<PathBuf>,
    pub delta: Option<f64>,
    pub c: Option<f64>,
}

/// Structural diagnostics of one snapshot: writes `support_mask.csv`,
/// `winrate.csv` (1-D positive skills) and `report.json`.
pub fn cmd_diagnose(snapshot: &Path, opts: &DiagnoseOptions) -> Result<Value> {
    let (t, particles) = read_snapshot(fs::File::open(snapshot)?)?;
    let parent = snapshot.parent().map(Path::to_path_buf).unwrap_or_default();
    let run = if opts.config.is_none() && parent.join("meta.json").is_file() {
        load_run(&parent).ok()
    } else {
        None
    };
    let mut cfg = match (&opts.config, &run) {
        (Some(p), _) => Some(RunConfig::load(p)?.0),
        (None, Some(r)) => Some(r.config.clone()),
        (None, None) => None,
    };
    if let (Some(c), Some(cfg)) = (opts.c, cfg.as_mut()) {
        cfg.diagnostics.c = c;
    }
    let weights = match (&opts.weights, &run) {
        (Some(w), _) => w.clone(),
        (None, Some(r)) => r.weights_at(t)?,
        (None, None) => vec![1.0 / particles.k() as f64; particles.k()],
    };
    let state = DecompositionState::new(particles, WeightVector::new(weights, 0.0)?, 0)?;
    let base = cfg.clone().unwrap_or_else(|| {
        let mut d = RunConfig::parse(FALLBACK_CONFIG).expect("fallback config is valid");
        if let Some(c) = opts.c {
            d.diagnostics.c = c;
        }
        d
    });
    let (summary, mask) = structure_summary(&base, &state, opts.delta)?;
    let out = opts.out.clone().unwrap_or(parent);
    fs::create_dir_all(&out)?;
    fs::write(out.join("support_mask.csv"), support_csv(&mask))?;
    let positive_1d = state.particles.dim() == 1 && state.particles.all_coords().iter().all(|v| *v > 0.0);
    if positive_1d {
        fs::write(out.join("winrate.csv"), winrate_table(&state, base.diagnostics.winrate_points)?)?;
    }
    let objective = match &cfg {
        Some(c) => Some(objective_parts(&state, &c.kernel()?, c.flow.mode, c.flow.theta, c.flow.beta)?),
        None => None,
    };
    let report = json!({
        "snapshot": snapshot.display().to_string(),
        "t": t,
        "k": state.k(),
        "n": state.particles.n(),
        "dim": state.particles.dim(),
        "weights": state.weights.as_slice(),
        "structure": summary,
        "objective": objective,
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Diagnostics defaults used when a snapshot has no configuration beside it.
const FALLBACK_CONFIG: &str = r#"
[target]
family = "gaussian1d"
mean = 0.0
sd = 1.0
[loss]
kernel = "variance"
[ensemble]
k = 1
n = 1
seed = 0
"#;

/// Files written by `emit-plots`, plus any warnings.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PlotFiles {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn histogram_csv(state: &DecompositionState, cfg: &RunConfig, bins: usize) -> String {
    let ps = &state.particles;
    let all = ps.all_coords();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let p = state.weights.as_slice();
    let mut counts = vec![vec![0usize; bins]; ps.k()];
    for (k, c) in counts.iter_mut().enumerate() {
        for v in ps.group(k) {
            c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let mut s = String::from("lo,hi,target");
    for k in 1..=ps.k() {
        let _ = write!(s, ",group_{k}");
    }
    s.push('\n');
    for b in 0..bins {
        let (a, z) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
        let _ = write!(s, "{a},{z},{}", cfg.target.log_density(&[0.5 * (a + z)]).exp());
        for (k, c) in counts.iter().enumerate() {
            let _ = write!(s, ",{}", p[k] * c[b] as f64 / (ps.n() as f64 * width));
        }
        s.push('\n');
    }
    s
}

/// Writes plot-ready CSVs into `<run_dir>/plots`: `traces.csv`,
/// `scatter_tXXXX.csv` per snapshot and `scatter_final.csv`, and for 1-D
/// runs `histogram.csv` (densities p_k μ_k and π) and `winrate.csv`.
pub fn cmd_emit_plots(run_dir: &Path) -> Result<PlotFiles> {
    let run = load_run(run_dir)?;
    let out = run_dir.join("plots");
    fs::create_dir_all(&out)?;
    let mut res = PlotFiles::default();
    let put = |name: &str, body: String, res: &mut PlotFiles| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        res.files.push(p);
        Ok(())
    };

    let phi_col = run.trace_header.iter().position(|h| h == "phi_norm");
    let mut traces = run.trace_header[..run.trace_header.len().min(6)].join(",");
    traces.push_str(",phi_norm_running_min\n");
    let mut m = f64::INFINITY;
    for row in &run.trace {
        if let Some(c) = phi_col {
            m = m.min(row[c]);
        }
        let cells: Vec<String> = row[..row.len().min(6)].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(traces, "{},{m}", cells.join(","));
    }
    let mut weights = String::from("t");
    for h in run.trace_header.iter().filter(|h| h.starts_with("p_")) {
        let _ = write!(weights, ",{h}");
    }
    weights.push('\n');
    for row in &run.trace {
        let cells: Vec<String> = std::iter::once(row[0]).chain(row[6.min(row.len())..].iter().copied()).map(|v| v.to_string()).collect();
        let _ = writeln!(weights, "{}", cells.join(","));
    }
    put("traces.csv", traces, &mut res)?;
    put("weights.csv", weights, &mut res)?;

    if run.snapshots.is_empty() {
        let w = format!("no particle snapshots in {}; emitted traces only", run_dir.display());
        eprintln!("warning: {w}");
        res.warnings.push(w);
        return Ok(res);
    }
    for (t, path) in &run.snapshots {
        let (_, ps) = read_snapshot(fs::File::open(path)?)?;
        put(&format!("scatter_t{t:04}.csv"), scatter_csv(&ps), &mut res)?;
    }
    let state = run.final_state()?;
    put("scatter_final.csv", scatter_csv(&state.particles), &mut res)?;
    if state.particles.dim() == 1 {
        put("histogram.csv", histogram_csv(&state, &run.config, 40), &mut res)?;
        if state.particles.all_coords().iter().all(|v| *v > 0.0) {
            put("winrate.csv", winrate_table(&state, run.config.diagnostics.winrate_points)?, &mut res)?;
        }
    }
    Ok(res)
}

/// Summary of a Euclidean run.
#[derive(Debug, Clone, Serialize)]
pub struct EuclidSummary {
    pub problem: String,
    pub steps: usize,
    pub g0: f64,
    pub g_final: f64,
    /// e^(−α T) g(x₀), the continuous-flow prediction.
    pub g_predicted: f64,
    pub f_final: f64,
    pub kkt_running_min: f64,
    /// C/√T when the problem's bound constants are known.
    pub residual_bound: Option<f64>,
}

/// Integrates a built-in Euclidean problem and writes the trajectory CSV
/// (`t,g,f,kkt_residual,x1..xn`) to `out`, if given.
pub fn cmd_euclid(problem: &str, x0: Option<Vec<f64>>, cfg: &EuclidFlowConfig, t_end: f64, out: Option<&Path>) -> Result<EuclidSummary> {
    let named = builtin_problem(problem)?;
    let x0 = x0.unwrap_or_else(|| named.x0.clone());
    let traj = integrate(&named.problem, &x0, cfg, t_end)?;
    if let Some(p) = out {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d)?;
        }
        fs::write(p, traj.to_csv())?;
    }
    let first = &traj.points[0];
    let last = traj.last();
    Ok(EuclidSummary {
        problem: problem.to_string(),
        steps: traj.points.len() - 1,
        g0: first.g,
        g_final: last.g,
        g_predicted: (-cfg.alpha * last.t).exp() * first.g,
        f_final: last.f,
        kkt_running_min: last.kkt_running_min,
        residual_bound: named
            .constants
            .map(|c| residual_bound_constant(&named.problem, &x0, cfg.alpha, &c) / last.t.sqrt()),
    })
}

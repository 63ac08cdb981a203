//! Config-driven runs, sweeps and manifests.
//!
//! A config is flat TOML with dotted keys (`grid.n_x = 96`). Each run lands
//! in `<out>/<run_id>/` with its CSV artifacts and `manifest.json`, and one
//! line is appended to `<out>/manifests.jsonl`. The run id is the SHA-256 of
//! the canonical JSON form of the fully resolved config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{ControlConfig, ControlSystem, FinalSpace, HumMode};
use crate::critical::{certify, enumerate_s, find_critical_lengths, s_root, CriticalRoot, SearchBox, SetTag};
use crate::discretization::{assemble_operator, BcFamily, Channel, SpatialGrid, TimeGrid};
use crate::profiles::Profile;
use crate::sobolev::{hidden_regularity_ratio, SpectralBasis};
use crate::solvers::{extract_trace, KdvSolver, LinearProblem, TracePosition};
use crate::steering::{picard_steer, PicardOptions};
use crate::verification::{energy_defects, manufactured_error, terminal_estimate, MmsCase};

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "KDV_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_LOG: &str = "manifests.jsonl";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("config error{}: {field}: {message}", line_suffix(.line))]
    Config { line: Option<usize>, field: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("task {task} failed: {message}")]
    Task { task: String, message: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
}

fn line_suffix(line: &Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config { .. })
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn task_err(task: Task, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Task { task: task.name().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Solve,
    Adjoint,
    Gramian,
    Control,
    Nonlinear,
    Critlen,
    Sweep,
    Norms,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Solve => "solve",
            Task::Adjoint => "adjoint",
            Task::Gramian => "gramian",
            Task::Control => "control",
            Task::Nonlinear => "nonlinear",
            Task::Critlen => "critlen",
            Task::Sweep => "sweep",
            Task::Norms => "norms",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub length: f64,
    pub n_x: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { length: 1.0, n_x: 96 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub horizon: f64,
    pub n_t: usize,
    pub theta: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { horizon: 1.0, n_t: 256, theta: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    /// "modal" or "nodal".
    pub final_space: String,
    pub modes: usize,
    /// "discrete" or "continuous".
    pub hum: String,
    pub epsilon: f64,
    /// Relative to the Gramian norm; added to `epsilon`.
    pub epsilon_relative: f64,
    pub cg_tol: f64,
    /// Per-channel Δ_t exponent, channel order.
    pub smoothing: [f64; 3],
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            final_space: "modal".into(),
            modes: 8,
            hum: "discrete".into(),
            epsilon: 0.0,
            epsilon_relative: 0.0,
            cg_tol: 1e-12,
            smoothing: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// zero, sine, sine_ramp, random, random_compatible.
    pub kind: String,
    pub amplitude: f64,
    pub mode: u32,
    pub modes: u32,
    pub stream: u64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { kind: "zero".into(), amplitude: 0.0, mode: 1, modes: 4, stream: 0 }
    }
}

impl ProfileSection {
    fn profile(&self) -> Option<Profile> {
        let (amplitude, mode, modes, stream) = (self.amplitude, self.mode, self.modes, self.stream);
        Some(match self.kind.as_str() {
            "zero" => Profile::Zero,
            "sine" => Profile::Sine { amplitude, mode },
            "sine_ramp" => Profile::SineRamp { amplitude, mode },
            "random" => Profile::Random { amplitude, modes, stream },
            "random_compatible" => Profile::RandomCompatible { amplitude, modes, stream },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    /// Report the manufactured-solution error instead of a homogeneous run.
    pub manufactured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Negative means the default cap.
    pub delta_cap: f64,
    pub inner_tol: f64,
}

impl Default for NonlinearSection {
    fn default() -> Self {
        let d = PicardOptions::default();
        Self { tol: d.tol, max_iter: d.max_iter, delta_cap: -1.0, inner_tol: d.inner_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CritlenSection {
    /// S, N or F.
    pub set: String,
    pub k_max: u32,
    pub seeds_per_axis: usize,
    pub half_width: f64,
    pub tol: f64,
}

impl Default for CritlenSection {
    fn default() -> Self {
        Self { set: "S".into(), k_max: 3, seeds_per_axis: 12, half_width: 15.0, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsSection {
    pub samples: usize,
    pub modes: u32,
}

impl Default for NormsSection {
    fn default() -> Self {
        Self { samples: 20, modes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// L, n_x or amplitude.
    pub parameter: String,
    pub values: Vec<f64>,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_channels")]
    pub channels: Vec<String>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub initial: ProfileSection,
    #[serde(default)]
    pub target: ProfileSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub nonlinear: NonlinearSection,
    #[serde(default)]
    pub critlen: CritlenSection,
    #[serde(default)]
    pub norms: NormsSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_family() -> String {
    "A".into()
}

fn default_channels() -> Vec<String> {
    vec!["h2".into()]
}

/// Line of `dotted` in the source, as a dotted key or a key under its table.
fn locate(source: &str, dotted: &str) -> Option<usize> {
    let (table, leaf) = match dotted.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", dotted),
    };
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key: String = key.split('.').map(str::trim).collect::<Vec<_>>().join(".");
        let full = if current.is_empty() { key } else { format!("{current}.{key}") };
        if full == dotted || (table.is_empty() && full == leaf) {
            return Some(i + 1);
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates. Diagnostics carry the line where possible.
    pub fn parse(source: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start.min(source.len())].matches('\n').count() + 1);
            let field = e.span().map(|s| source[s].lines().next().unwrap_or("").trim().to_string()).unwrap_or_default();
            ExperimentError::Config { line, field, message: e.message().trim().to_string() }
        })?;
        cfg.validate_with(Some(source))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.validate_with(None)
    }

    fn validate_with(&self, source: Option<&str>) -> Result<(), ExperimentError> {
        let bad = |field: &str, message: String| ExperimentError::Config {
            line: source.and_then(|s| locate(s, field)),
            field: field.to_string(),
            message,
        };
        let family = self.bc_family().ok_or_else(|| bad("family", format!("expected A or B, got {:?}", self.family)))?;
        if self.channels.is_empty() {
            return Err(bad("channels", "at least one channel is required".into()));
        }
        for c in &self.channels {
            match Channel::parse(c) {
                Some((f, _)) if f == family => {}
                Some(_) => return Err(bad("channels", format!("{c} belongs to the other family"))),
                None => return Err(bad("channels", format!("unknown channel {c:?}"))),
            }
        }
        if !(self.grid.length > 0.0) {
            return Err(bad("grid.length", format!("must be positive, got {}", self.grid.length)));
        }
        if self.grid.n_x < 8 {
            return Err(bad("grid.n_x", format!("must be at least 8, got {}", self.grid.n_x)));
        }
        if !(self.time.horizon > 0.0) {
            return Err(bad("time.horizon", format!("must be positive, got {}", self.time.horizon)));
        }
        if self.time.n_t < 8 {
            return Err(bad("time.n_t", format!("must be at least 8, got {}", self.time.n_t)));
        }
        if !(0.0..=1.0).contains(&self.time.theta) {
            return Err(bad("time.theta", format!("must lie in [0, 1], got {}", self.time.theta)));
        }
        if !matches!(self.control.final_space.as_str(), "modal" | "nodal") {
            return Err(bad("control.final_space", format!("expected modal or nodal, got {:?}", self.control.final_space)));
        }
        if !matches!(self.control.hum.as_str(), "discrete" | "continuous") {
            return Err(bad("control.hum", format!("expected discrete or continuous, got {:?}", self.control.hum)));
        }
        if self.control.modes == 0 {
            return Err(bad("control.modes", "must be positive".into()));
        }
        if self.control.epsilon < 0.0 || self.control.epsilon_relative < 0.0 {
            return Err(bad("control.epsilon", "must be nonnegative".into()));
        }
        for e in self.control.smoothing {
            if ![-1.0 / 3.0, 0.0, 1.0 / 3.0].iter().any(|v| (v - e).abs() < 1e-12) {
                return Err(bad("control.smoothing", format!("exponent {e} not in {{-1/3, 0, 1/3}}")));
            }
        }
        for (name, p) in [("initial.kind", &self.initial), ("target.kind", &self.target)] {
            if p.profile().is_none() {
                return Err(bad(name, format!("unknown profile {:?}", p.kind)));
            }
        }
        if SetTag::parse(&self.critlen.set).is_none() {
            return Err(bad("critlen.set", format!("expected S, N or F, got {:?}", self.critlen.set)));
        }
        if self.critlen.k_max == 0 {
            return Err(bad("critlen.k_max", "must be positive".into()));
        }
        if self.critlen.seeds_per_axis == 0 || !(self.critlen.half_width > 0.0) {
            return Err(bad("critlen.seeds_per_axis", "search grid must be nonempty".into()));
        }
        if self.norms.samples == 0 {
            return Err(bad("norms.samples", "must be positive".into()));
        }
        if self.task == Task::Sweep {
            let Some(sw) = &self.sweep else {
                return Err(bad("sweep", "task = sweep needs a sweep section".into()));
            };
            if sw.task == Task::Sweep {
                return Err(bad("sweep.task", "sweeps do not nest".into()));
            }
            if sw.values.is_empty() {
                return Err(bad("sweep.values", "must be nonempty".into()));
            }
            if !matches!(sw.parameter.as_str(), "L" | "n_x" | "amplitude") {
                return Err(bad("sweep.parameter", format!("expected L, n_x or amplitude, got {:?}", sw.parameter)));
            }
        }
        Ok(())
    }

    pub fn bc_family(&self) -> Option<BcFamily> {
        match self.family.as_str() {
            "A" => Some(BcFamily::A),
            "B" => Some(BcFamily::B),
            _ => None,
        }
    }

    /// Canonical JSON text: keys sorted, no whitespace.
    pub fn canonical(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn run_id(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }

    /// Copy with `parameter` set to `value`. An `n_x` change keeps `n_t/n_x`;
    /// an amplitude change applies to both profiles.
    pub fn with_parameter(&self, parameter: &str, value: f64) -> Result<Self, ExperimentError> {
        let mut c = self.clone();
        let bad = |m: String| ExperimentError::Config { line: None, field: "sweep.values".into(), message: m };
        match parameter {
            "L" => c.grid.length = value,
            "n_x" => {
                if value.fract() != 0.0 || value < 8.0 {
                    return Err(bad(format!("n_x value {value} is not an integer ≥ 8")));
                }
                let n = value as usize;
                c.time.n_t = ((self.time.n_t as f64) * value / self.grid.n_x as f64).round() as usize;
                c.grid.n_x = n;
            }
            "amplitude" => {
                c.initial.amplitude = value;
                c.target.amplitude = value;
            }
            other => return Err(bad(format!("unknown parameter {other:?}"))),
        }
        c.validate()?;
        Ok(c)
    }

    fn grids(&self) -> Result<(SpatialGrid, TimeGrid), ExperimentError> {
        let g = SpatialGrid::new(self.grid.length, self.grid.n_x).map_err(|e| task_err(self.task, e))?;
        let t = TimeGrid::new(self.time.horizon, self.time.n_t).map_err(|e| task_err(self.task, e))?;
        Ok((g, t))
    }

    fn control_system(&self) -> Result<ControlSystem, ExperimentError> {
        let (g, t) = self.grids()?;
        let family = self.bc_family().expect("validated");
        let chans: Vec<Channel> = self.channels.iter().map(|c| Channel::parse(c).expect("validated").1).collect();
        let mut cfg = ControlConfig::new(family, &chans).map_err(|e| task_err(self.task, e))?;
        cfg.theta = self.time.theta;
        for ch in Channel::ALL {
            cfg = cfg.with_smoothing(ch, self.control.smoothing[ch.index()]);
        }
        cfg = cfg
            .with_final_space(match self.control.final_space.as_str() {
                "nodal" => FinalSpace::Nodal,
                _ => FinalSpace::Modal { modes: self.control.modes },
            })
            .with_hum(if self.control.hum == "continuous" { HumMode::Continuous } else { HumMode::Discrete })
            .with_epsilon(self.control.epsilon);
        let mut sys = ControlSystem::new(cfg.clone(), g, t).map_err(|e| task_err(self.task, e))?;
        if self.control.epsilon_relative > 0.0 {
            let eps = self.control.epsilon + self.control.epsilon_relative * sys.gramian().norm();
            sys = ControlSystem::new(cfg.with_epsilon(eps), g, t).map_err(|e| task_err(self.task, e))?;
        }
        Ok(sys)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task: Task,
    pub config_echo: serde_json::Value,
    pub tool_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<Artifact>,
    pub headline_metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.headline_metrics.get(key).copied()
    }
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes a CSV with a header row; floats use the shortest round-trip form.
fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Shortest round-trip decimal; exponent form for very large or small
/// magnitudes, and `-0` folded into `0`.
fn f(v: f64) -> String {
    format!("{:?}", v + 0.0)
}

struct TaskOutput {
    metrics: BTreeMap<String, f64>,
    files: Vec<String>,
}

impl TaskOutput {
    fn new() -> Self {
        Self { metrics: BTreeMap::new(), files: Vec::new() }
    }

    fn metric(&mut self, key: impl Into<String>, v: f64) {
        if v.is_finite() {
            self.metrics.insert(key.into(), v);
        }
    }
}

fn trajectory_csv(dir: &Path, name: &str, traj: &crate::solvers::StateTrajectory, out: &mut TaskOutput) -> Result<(), ExperimentError> {
    let xs = traj.grid.nodes();
    let ts = traj.tgrid.times();
    let rows = (0..ts.len()).flat_map(|k| {
        let xs = &xs;
        let ts = &ts;
        (0..xs.len()).map(move |i| vec![f(ts[k]), f(xs[i]), f(traj.samples[(k, i)])])
    });
    write_csv(&dir.join(name), &["t", "x", "value"], rows.collect::<Vec<_>>())?;
    out.files.push(name.to_string());
    Ok(())
}

fn run_solve(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let family = cfg.bc_family().expect("validated");
    if cfg.solve.manufactured {
        let e = manufactured_error(MmsCase::Forward(family), cfg.grid.n_x, cfg.time.n_t, cfg.grid.length, cfg.time.horizon)
            .map_err(|e| task_err(Task::Solve, e))?;
        out.metric("mms_error", e);
        return Ok(out);
    }
    let (g, t) = cfg.grids()?;
    let p = cfg.initial.profile().expect("validated");
    let y0 = assemble_operator(&g, family, false).project(&p.sample(&g, cfg.seed));
    let solver = KdvSolver::new(g, t, family, cfg.time.theta).map_err(|e| task_err(Task::Solve, e))?;
    let traj = solver.forward_linear(&LinearProblem::forward(g, t, family, y0.clone()).with_theta(cfg.time.theta)).map_err(|e| task_err(Task::Solve, e))?;
    let budget = energy_defects(&traj, false);
    let e0 = traj.energy(0);
    out.metric("initial_energy", e0);
    out.metric("final_energy", traj.energy(t.n_t()));
    out.metric("xt_norm", traj.xt_norm());
    out.metric("max_energy_defect", budget.max_admissible());
    trajectory_csv(dir, "trajectory.csv", &traj, &mut out)?;
    let ts = t.times();
    write_csv(
        &dir.join("energy.csv"),
        &["step", "t", "energy", "defect"],
        (0..t.n_t()).map(|k| vec![k.to_string(), f(ts[k + 1]), f(traj.energy(k + 1)), f(budget.defects[k])]),
    )?;
    out.files.push("energy.csv".into());
    Ok(out)
}

fn run_adjoint(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let family = cfg.bc_family().expect("validated");
    let (g, t) = cfg.grids()?;
    let p = cfg.target.profile().expect("validated");
    let psi_t = assemble_operator(&g, family, true).project(&p.sample(&g, cfg.seed));
    let solver = KdvSolver::new(g, t, family, cfg.time.theta).map_err(|e| task_err(Task::Adjoint, e))?;
    let traj = solver.adjoint(&LinearProblem::adjoint(g, t, family, psi_t).with_theta(cfg.time.theta)).map_err(|e| task_err(Task::Adjoint, e))?;
    let (lhs, rhs) = terminal_estimate(&traj);
    out.metric("terminal_energy", lhs);
    out.metric("initial_energy", traj.energy(0));
    out.metric("estimate_rhs", rhs);
    out.metric("estimate_ratio", if rhs > 0.0 { lhs / rhs } else { 0.0 });
    out.metric("max_energy_defect", energy_defects(&traj, true).max_admissible());
    trajectory_csv(dir, "trajectory.csv", &traj, &mut out)?;
    let traces: Vec<Vec<f64>> = [(0, TracePosition::Right), (1, TracePosition::Right), (2, TracePosition::Left)]
        .iter()
        .map(|&(j, pos)| extract_trace(&traj, j, pos).map(|s| s.samples))
        .collect::<Result<_, _>>()
        .map_err(|e| task_err(Task::Adjoint, e))?;
    let ts = t.times();
    write_csv(
        &dir.join("traces.csv"),
        &["t", "value_right", "dx_right", "dxx_left"],
        (0..ts.len()).map(|k| vec![f(ts[k]), f(traces[0][k]), f(traces[1][k]), f(traces[2][k])]),
    )?;
    out.files.push("traces.csv".into());
    Ok(out)
}

fn run_gramian(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let sys = cfg.control_system()?;
    let g = sys.gramian();
    out.metric("sigma_min", g.sigma_min());
    out.metric("sigma_max", g.sigma_max());
    out.metric("observability_constant", g.observability_constant());
    out.metric("asymmetry", g.asymmetry());
    out.metric("dim", g.dim() as f64);
    write_csv(&dir.join("gramian_eigenvalues.csv"), &["index", "eigenvalue"], g.eigenvalues.iter().enumerate().map(|(i, v)| vec![i.to_string(), f(*v)]))?;
    out.files.push("gramian_eigenvalues.csv".into());
    Ok(out)
}

fn profiles(cfg: &ExperimentConfig, g: &SpatialGrid) -> (DVector<f64>, DVector<f64>) {
    let y0 = cfg.initial.profile().expect("validated").sample(g, cfg.seed);
    let yt = cfg.target.profile().expect("validated").sample(g, cfg.seed);
    (y0, yt)
}

fn controls_csv(dir: &Path, sys: &ControlSystem, controls: &[crate::solvers::ControlSignal], out: &mut TaskOutput) -> Result<(), ExperimentError> {
    let mut header = vec!["t".to_string()];
    header.extend(sys.config.channels.iter().map(|c| c.label(sys.config.family)));
    let ts = sys.tgrid.times();
    let rows = (0..ts.len()).map(|k| {
        let mut r = vec![f(ts[k])];
        r.extend(controls.iter().map(|c| f(c.samples[k])));
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("controls.csv"), &header, rows)?;
    out.files.push("controls.csv".into());
    Ok(())
}

fn run_control(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let sys = cfg.control_system()?;
    let (y0, yt) = profiles(cfg, &sys.grid);
    let res = sys.synthesize(&y0, &yt, cfg.control.cg_tol).map_err(|e| task_err(Task::Control, e))?;
    out.metric("relative_error", res.relative_error);
    out.metric("nodal_error", res.nodal_error);
    out.metric("cg_iterations", res.cg_iterations as f64);
    out.metric("gramian_sigma_min", res.gramian_sigma_min);
    let basis = SpectralBasis::new(sys.tgrid);
    for c in &res.controls {
        let label = c.channel.map(|ch| ch.label(sys.config.family)).unwrap_or_default();
        out.metric(format!("control_l2_{label}"), c.l2_norm());
        let hs = basis.h_s_norm(&c.samples, c.sobolev_index).map_err(|e| task_err(Task::Control, e))?;
        out.metric(format!("control_hs_{label}"), hs);
    }
    controls_csv(dir, &sys, &res.controls, &mut out)?;
    let xs = sys.grid.nodes();
    write_csv(
        &dir.join("final_state.csv"),
        &["x", "achieved", "target"],
        (0..xs.len()).map(|i| vec![f(xs[i]), f(res.achieved_final[i]), f(yt[i])]),
    )?;
    out.files.push("final_state.csv".into());
    Ok(out)
}

fn run_nonlinear(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let sys = cfg.control_system()?;
    let (y0, yt) = profiles(cfg, &sys.grid);
    let n = &cfg.nonlinear;
    let opts = PicardOptions {
        delta_cap: (n.delta_cap >= 0.0).then_some(n.delta_cap),
        max_iter: n.max_iter,
        tol: n.tol,
        cg_tol: cfg.control.cg_tol,
        inner_tol: n.inner_tol,
    };
    let res = picard_steer(&sys, &y0, &yt, &opts).map_err(|e| task_err(Task::Nonlinear, e))?;
    out.metric("relative_error", res.relative_error);
    out.metric("contraction_ratio", res.contraction_ratio());
    out.metric("iterations", res.last().iterate_index as f64);
    out.metric("increment_norm", res.last().increment_norm);
    out.metric("converged", if res.converged { 1.0 } else { 0.0 });
    write_csv(
        &dir.join("picard.csv"),
        &["iterate", "increment_norm", "contraction_ratio", "linear_defect"],
        res.history.iter().map(|s| vec![s.iterate_index.to_string(), f(s.increment_norm), f(s.contraction_ratio), f(s.linear_defect)]),
    )?;
    out.files.push("picard.csv".into());
    controls_csv(dir, &sys, &res.synthesis.controls, &mut out)?;
    Ok(out)
}

/// One atlas row per root: `set, k, l, length, a, b, c, λ, residual, σ_min`.
/// `k, l` are the S witnesses and 0 for the other sets.
pub fn atlas_rows(cfg: &CritlenSection) -> Result<Vec<(u32, u32, CriticalRoot)>, ExperimentError> {
    let tag = SetTag::parse(&cfg.set).ok_or_else(|| ExperimentError::Config {
        line: None,
        field: "critlen.set".into(),
        message: format!("expected S, N or F, got {:?}", cfg.set),
    })?;
    let err = |e: crate::critical::CriticalError| task_err(Task::Critlen, e);
    let mut rows = Vec::new();
    if tag == SetTag::S {
        for s in enumerate_s(cfg.k_max).map_err(err)? {
            for &(k, l) in &s.witnesses {
                rows.push((k, l, s_root(k, l)));
            }
        }
    } else {
        let w = cfg.half_width;
        let b = SearchBox { re: (-w, w), im: (-w, w) };
        for mut r in find_critical_lengths(tag, b, cfg.seeds_per_axis, cfg.tol).map_err(err)? {
            r.certification_sigma = certify(r.length, &r).map_err(err)?.sigma_min;
            rows.push((0, 0, r));
        }
    }
    Ok(rows)
}

pub const ATLAS_HEADER: [&str; 14] =
    ["set", "k", "l", "length", "a_re", "a_im", "b_re", "b_im", "c_re", "c_im", "lambda_re", "lambda_im", "residual", "sigma_min"];

pub fn write_atlas(path: &Path, rows: &[(u32, u32, CriticalRoot)]) -> Result<(), ExperimentError> {
    write_csv(
        path,
        &ATLAS_HEADER,
        rows.iter().map(|(k, l, r)| {
            vec![
                r.set_tag.tag().to_string(),
                k.to_string(),
                l.to_string(),
                f(r.length),
                f(r.a.re),
                f(r.a.im),
                f(r.b.re),
                f(r.b.im),
                f(r.c.re),
                f(r.c.im),
                f(r.lambda.re),
                f(r.lambda.im),
                f(r.residual_norm),
                f(r.certification_sigma),
            ]
        }),
    )
}

fn run_critlen(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let rows = atlas_rows(&cfg.critlen)?;
    out.metric("count", rows.len() as f64);
    if let Some(min) = rows.iter().map(|r| r.2.length).reduce(f64::min) {
        out.metric("min_length", min);
    }
    out.metric("max_residual", rows.iter().map(|r| r.2.residual_norm).fold(0.0, f64::max));
    out.metric("max_sigma_min", rows.iter().map(|r| r.2.certification_sigma).fold(0.0, f64::max));
    write_atlas(&dir.join("atlas.csv"), &rows)?;
    out.files.push("atlas.csv".into());
    Ok(out)
}

fn run_norms(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let mut out = TaskOutput::new();
    let family = cfg.bc_family().expect("validated");
    let (g, t) = cfg.grids()?;
    let solver = KdvSolver::new(g, t, family, cfg.time.theta).map_err(|e| task_err(Task::Norms, e))?;
    let op = assemble_operator(&g, family, true);
    let ratios: Vec<f64> = (0..cfg.norms.samples as u64)
        .map(|i| {
            let p = Profile::RandomCompatible { amplitude: 1.0, modes: cfg.norms.modes, stream: i };
            let psi_t = op.project(&p.sample(&g, cfg.seed));
            let traj = solver
                .adjoint(&LinearProblem::adjoint(g, t, family, psi_t.clone()).with_theta(cfg.time.theta))
                .map_err(|e| e.to_string())?;
            hidden_regularity_ratio(&traj, g.norm(psi_t.as_slice())).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| task_err(Task::Norms, e))?;
    out.metric("ratio_max", ratios.iter().copied().fold(f64::MIN, f64::max));
    out.metric("ratio_min", ratios.iter().copied().fold(f64::MAX, f64::min));
    out.metric("ratio_mean", ratios.iter().sum::<f64>() / ratios.len() as f64);
    write_csv(&dir.join("norms.csv"), &["sample", "ratio"], ratios.iter().enumerate().map(|(i, r)| vec![i.to_string(), f(*r)]))?;
    out.files.push("norms.csv".into());
    Ok(out)
}

fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    match cfg.task {
        Task::Solve => run_solve(cfg, dir),
        Task::Adjoint => run_adjoint(cfg, dir),
        Task::Gramian => run_gramian(cfg, dir),
        Task::Control => run_control(cfg, dir),
        Task::Nonlinear => run_nonlinear(cfg, dir),
        Task::Critlen => run_critlen(cfg, dir),
        Task::Norms => run_norms(cfg, dir),
        Task::Sweep => run_sweep_into(cfg, dir),
    }
}

fn finish(cfg: &ExperimentConfig, dir: &Path, started: f64, out: TaskOutput) -> Result<RunManifest, ExperimentError> {
    let outputs = out
        .files
        .iter()
        .map(|p| Ok(Artifact { path: p.clone(), sha256: sha256_file(&dir.join(p))? }))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let manifest = RunManifest {
        run_id: cfg.run_id(),
        task: cfg.task,
        config_echo: serde_json::to_value(cfg).expect("config serializes"),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now_unix(),
        outputs,
        headline_metrics: out.metrics,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

fn append_log(out_root: &Path, manifest: &RunManifest) -> Result<(), ExperimentError> {
    let path = out_root.join(MANIFEST_LOG);
    let mut file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
    let line = serde_json::to_string(manifest).expect("manifest serializes");
    writeln!(file, "{line}").map_err(|e| io_err(&path, e))
}

fn run_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let started = now_unix();
    let out = execute(cfg, dir)?;
    finish(cfg, dir, started, out)
}

/// Runs `cfg` into `<out_root>/<run_id>/` and appends to the manifest log.
pub fn run(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunManifest, ExperimentError> {
    let manifest = run_in(cfg, &out_root.join(cfg.run_id()))?;
    append_log(out_root, &manifest)?;
    Ok(manifest)
}

pub fn run_file(config_path: &Path, out_root: &Path) -> Result<RunManifest, ExperimentError> {
    run(&ExperimentConfig::load(config_path)?, out_root)
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    /// "ok" or the error text.
    pub status: String,
    pub metrics: BTreeMap<String, f64>,
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Runs every value independently on a worker pool; rows come back in input order.
pub fn sweep_rows(base: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    let sw = base.sweep.as_ref().ok_or_else(|| ExperimentError::Config {
        line: None,
        field: "sweep".into(),
        message: "missing sweep section".into(),
    })?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count() {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| task_err(Task::Sweep, e))?;
    let one = |(index, value): (usize, f64)| -> SweepRow {
        let result = base.with_parameter(&sw.parameter, value).and_then(|mut c| {
            c.task = sw.task;
            c.sweep = None;
            run_in(&c, &dir.join(format!("{index:04}")))
        });
        match result {
            Ok(m) => SweepRow { index, value, status: "ok".into(), metrics: m.headline_metrics },
            Err(e) => SweepRow { index, value, status: e.to_string(), metrics: BTreeMap::new() },
        }
    };
    let rows: Vec<SweepRow> = pool.install(|| sw.values.par_iter().copied().enumerate().map(one).collect());
    Ok(rows)
}

fn run_sweep_into(cfg: &ExperimentConfig, dir: &Path) -> Result<TaskOutput, ExperimentError> {
    let rows = sweep_rows(cfg, dir)?;
    let sw = cfg.sweep.as_ref().expect("checked by sweep_rows");
    let keys: Vec<String> = rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut header = vec!["index".to_string(), "parameter".into(), "value".into(), "status".into()];
    header.extend(keys.iter().cloned());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &dir.join("sweep.csv"),
        &header,
        rows.iter().map(|r| {
            let mut v = vec![r.index.to_string(), sw.parameter.clone(), f(r.value), r.status.clone()];
            v.extend(keys.iter().map(|k| r.metrics.get(k).map(|x| f(*x)).unwrap_or_default()));
            v
        }),
    )?;
    let mut out = TaskOutput::new();
    out.files.push("sweep.csv".into());
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    out.metric("values", rows.len() as f64);
    out.metric("ok", ok as f64);
    out.metric("failed", (rows.len() - ok) as f64);
    Ok(out)
}

/// Recomputes every artifact checksum of the manifest in `run_dir`.
pub fn verify_manifest(run_dir: &Path) -> Result<RunManifest, ExperimentError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    for a in &manifest.outputs {
        if sha256_file(&run_dir.join(&a.path))? != a.sha256 {
            return Err(ExperimentError::Checksum(a.path.clone()));
        }
    }
    Ok(manifest)
}

/// Every manifest line recorded under `out_root`, oldest first.
pub fn read_log(out_root: &Path) -> Result<Vec<RunManifest>, ExperimentError> {
    let path = out_root.join(MANIFEST_LOG);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| io_err(&path, e))).collect()
}

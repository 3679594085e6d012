//! Experiment drivers: the perturbed Peano ODE, threshold sweeps over
//! `(alpha, beta)` planes, and the end-to-end pipeline behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{besov_parts, BesovIndex, ThermicSettings};
use crate::grid::{Field, Grid};
use crate::kernel::{mollifier_convergence, mollify, realize_kernel, KernelSpec};
use crate::particles::sample_stable_increment;
use crate::particles::{compare_to_pde, simulate, SimConfig};
use crate::semigroup::{semigroup_apply, StableLaw};
use crate::solver::{
    apriori_sweep, default_test_battery, epsilon_stability_study, picard_solve, weak_form_residual,
    InitialLaw, SolverConfig, SolverError, TimeNormSettings,
};
use crate::threshold::{check_strong, ParameterSet, ThresholdReport};
use crate::trajectory::DensityTrajectory;
use crate::util::serde_exponent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("threshold gate: {0}")]
    Gate(String),
    #[error("numerical divergence in {stage}: {message}")]
    Divergence {
        stage: &'static str,
        message: String,
    },
    #[error("{stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 divergence, 4 threshold gate, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Divergence { .. } => 3,
            ExperimentError::Gate(_) => 4,
            ExperimentError::Stage { .. } | ExperimentError::Io(_) => 1,
        }
    }

    fn from_solver(stage: &'static str, e: SolverError) -> Self {
        match e {
            SolverError::ThresholdGate { .. } => ExperimentError::Gate(e.to_string()),
            SolverError::Diverged { .. } | SolverError::NonFinite { .. } => {
                ExperimentError::Divergence {
                    stage,
                    message: e.to_string(),
                }
            }
            SolverError::Config(_) | SolverError::Initial(_) | SolverError::Threshold(_) => {
                ExperimentError::Config(format!("{stage}: {e}"))
            }
            other => ExperimentError::Stage {
                stage,
                message: other.to_string(),
            },
        }
    }

    fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        ExperimentError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

fn default_seed() -> u64 {
    0
}

/// `dx = sgn(x)|x|^beta ds + eps dW` from `x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeanoConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub x0: f64,
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl PeanoConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.beta > -1.0 && self.beta < 0.0) {
            return Err(ExperimentError::Config(format!(
                "beta = {} outside (-1, 0)",
                self.beta
            )));
        }
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(ExperimentError::Config(format!(
                "alpha = {} outside (1, 2]",
                self.alpha
            )));
        }
        if !(self.eps >= 0.0) || !(self.dt > 0.0) || !(self.horizon > 0.0) || !self.x0.is_finite() {
            return Err(ExperimentError::Config(
                "eps must be >= 0, dt and horizon positive, x0 finite".into(),
            ));
        }
        if self.eps > 0.0 && self.paths == 0 {
            return Err(ExperimentError::Config("need at least one path".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Prefactor of the maximal solutions `+-c s^{1/(1-beta)}` started at zero.
pub fn peano_constant(beta: f64) -> f64 {
    (1.0 - beta).powf(1.0 / (1.0 - beta))
}

fn peano_drift(x: f64, beta: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub x_end: f64,
    pub envelope: f64,
    pub relative_error: f64,
    /// `(s, x(s), envelope(s))` at up to 100 evenly spaced checkpoints.
    pub samples: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadReport {
    /// `median |x_T| / (eps T^{1/alpha})`.
    pub spread: f64,
    /// Fraction of paths ending on the positive half-line.
    pub positive_fraction: f64,
    /// Fraction of paths changing sign during the second half of the horizon.
    pub crossing_fraction: f64,
    /// Quantiles 5%, 25%, 50%, 75%, 95% of `x_T`.
    pub quantiles: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeanoReport {
    Deterministic(EnvelopeReport),
    Noisy(SpreadReport),
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn run_peano(cfg: &PeanoConfig) -> Result<PeanoReport, ExperimentError> {
    cfg.validate()?;
    let steps = cfg.steps();
    if cfg.eps == 0.0 {
        let sign = if cfg.x0 < 0.0 { -1.0 } else { 1.0 };
        let c = peano_constant(cfg.beta);
        let env = |s: f64| {
            if cfg.x0 == 0.0 {
                0.0
            } else {
                sign * c * s.powf(1.0 / (1.0 - cfg.beta))
            }
        };
        let every = (steps / 100).max(1);
        let mut x = cfg.x0;
        let mut samples = vec![(0.0, x, env(0.0))];
        for k in 1..=steps {
            x += cfg.dt * peano_drift(x, cfg.beta);
            if k % every == 0 || k == steps {
                let s = k as f64 * cfg.dt;
                samples.push((s, x, env(s)));
            }
        }
        let envelope = env(steps as f64 * cfg.dt);
        let relative_error = if envelope == 0.0 {
            x.abs()
        } else {
            (x - envelope).abs() / envelope.abs()
        };
        return Ok(PeanoReport::Deterministic(EnvelopeReport {
            x_end: x,
            envelope,
            relative_error,
            samples,
        }));
    }
    let law =
        StableLaw::isotropic(cfg.alpha).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let half = steps / 2;
    let mut finals = Vec::with_capacity(cfg.paths);
    let mut crossings = 0usize;
    for p in 0..cfg.paths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64);
        let mut x = cfg.x0;
        let mut crossed = false;
        for k in 0..steps {
            let noise = sample_stable_increment(&law, cfg.dt, 1, &mut rng)[0];
            let next = x + cfg.dt * peano_drift(x, cfg.beta) + cfg.eps * noise;
            if k >= half && next * x < 0.0 {
                crossed = true;
            }
            x = next;
        }
        if crossed {
            crossings += 1;
        }
        finals.push(x);
    }
    let t = steps as f64 * cfg.dt;
    let mut abs: Vec<f64> = finals.iter().map(|x| x.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mut sorted = finals.clone();
    sorted.sort_by(f64::total_cmp);
    let n = finals.len() as f64;
    Ok(PeanoReport::Noisy(SpreadReport {
        spread: quantile(&abs, 0.5) / (cfg.eps * t.powf(1.0 / cfg.alpha)),
        positive_fraction: finals.iter().filter(|&&x| x > 0.0).count() as f64 / n,
        crossing_fraction: crossings as f64 / n,
        quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&sorted, q)),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeanoSweepRow {
    pub beta: f64,
    pub above_threshold: bool,
    pub report: SpreadReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeanoSweep {
    pub rows: Vec<PeanoSweepRow>,
    /// `"increasing"`, `"decreasing"` or `"mixed"` trend of the spread in beta.
    pub trend: &'static str,
}

impl PeanoSweep {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "beta",
            "above_threshold",
            "spread",
            "positive_fraction",
            "crossing_fraction",
            "q05",
            "q25",
            "q50",
            "q75",
            "q95",
        ])?;
        for r in &self.rows {
            let mut row = vec![
                format!("{:?}", r.beta),
                r.above_threshold.to_string(),
                format!("{:e}", r.report.spread),
                format!("{:?}", r.report.positive_fraction),
                format!("{:?}", r.report.crossing_fraction),
            ];
            row.extend(r.report.quantiles.iter().map(|q| format!("{q:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Spread statistic across `betas` with everything else from `base`
/// (`base.eps` must be positive). Descriptive only.
pub fn run_peano_sweep(base: &PeanoConfig, betas: &[f64]) -> Result<PeanoSweep, ExperimentError> {
    if !(base.eps > 0.0) {
        return Err(ExperimentError::Config("a beta sweep needs eps > 0".into()));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cfg = PeanoConfig { beta, ..*base };
        match run_peano(&cfg)? {
            PeanoReport::Noisy(report) => rows.push(PeanoSweepRow {
                beta,
                above_threshold: beta > 1.0 - base.alpha,
                report,
            }),
            PeanoReport::Deterministic(_) => unreachable!("eps > 0"),
        }
    }
    let up = rows
        .windows(2)
        .all(|w| w[1].report.spread >= w[0].report.spread);
    let down = rows
        .windows(2)
        .all(|w| w[1].report.spread <= w[0].report.spread);
    let trend = match (up, down) {
        (true, false) => "increasing",
        (false, true) => "decreasing",
        _ => "mixed",
    };
    Ok(PeanoSweep { rows, trend })
}

/// Inclusive evenly spaced values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Range {
    pub fn values(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.start];
        }
        (0..self.steps)
            .map(|i| self.start + (self.end - self.start) * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSweepConfig {
    pub alpha: Range,
    pub beta: Range,
    #[serde(with = "serde_exponent")]
    pub p: f64,
    #[serde(with = "serde_exponent")]
    pub q: f64,
    #[serde(with = "serde_exponent")]
    pub r: f64,
    pub d: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major over `(alpha, beta)`.
    pub reports: Vec<ThresholdReport>,
}

pub fn run_threshold_sweep(cfg: &ThresholdSweepConfig) -> Result<ThresholdSweep, ExperimentError> {
    let alphas = cfg.alpha.values();
    let betas = cfg.beta.values();
    let mut reports = Vec::with_capacity(alphas.len() * betas.len());
    for &a in &alphas {
        for &b in &betas {
            let ps = ParameterSet::from_f64(a, b, cfg.p, cfg.q, cfg.r, cfg.d)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            reports.push(check_strong(&ps));
        }
    }
    Ok(ThresholdSweep {
        alphas,
        betas,
        reports,
    })
}

impl ThresholdSweep {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(ThresholdReport::csv_header())?;
        for r in &self.reports {
            wr.write_record(r.csv_row())?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Boundary lines `beta(alpha)` of the three regions.
    pub fn write_boundaries<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "alpha",
            "weak_boundary",
            "strong_boundary",
            "linear_boundary",
        ])?;
        let nb = self.betas.len();
        for (i, &a) in self.alphas.iter().enumerate() {
            let ps = &self.reports[i * nb].params;
            wr.write_record([
                format!("{a:?}"),
                ps.weak_threshold().to_string(),
                ps.strong_threshold().to_string(),
                ps.linear_threshold().to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Text map with beta decreasing downwards and alpha increasing rightwards:
    /// `S` strong, `W` weak only, `l` linear only, `.` none.
    pub fn region_map(&self) -> String {
        let nb = self.betas.len();
        let mut out = String::new();
        for j in (0..nb).rev() {
            out.push_str(&format!("{:>8.3} ", self.betas[j]));
            for i in 0..self.alphas.len() {
                let r = &self.reports[i * nb + j];
                out.push(if r.strong_ok {
                    'S'
                } else if r.weak_ok {
                    'W'
                } else if r.linear_ok {
                    'l'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}

/// Grid shape for the standalone sections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub d: usize,
    pub n: usize,
    pub half_width: f64,
}

impl GridShape {
    pub fn build(&self) -> Result<Grid, ExperimentError> {
        Grid::new(self.d, self.n, self.half_width)
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub law: StableLaw,
    pub t: f64,
}

/// A density on a grid, optionally smoothed by the semigroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub grid: GridShape,
    pub initial: InitialLaw,
    #[serde(default)]
    pub smoothing: Option<Smoothing>,
}

impl FieldSection {
    pub fn build(&self) -> Result<Field, ExperimentError> {
        let grid = self.grid.build()?;
        let f = self
            .initial
            .as_field(&grid)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        match &self.smoothing {
            Some(s) => {
                semigroup_apply(&f, s.t, &s.law).map_err(|e| ExperimentError::Config(e.to_string()))
            }
            None => Ok(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesovSection {
    pub field: FieldSection,
    pub law: StableLaw,
    pub indices: Vec<BesovIndex>,
    #[serde(default)]
    pub thermic: ThermicSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelStudy {
    pub kernel: KernelSpec,
    pub law: StableLaw,
    pub grid: GridShape,
    pub eps_list: Vec<f64>,
    pub target: f64,
    #[serde(default)]
    pub thermic: ThermicSettings,
}

fn default_v_nodes() -> usize {
    100
}
fn default_stride() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub eps_list: Vec<f64>,
    pub theta: f64,
    pub rbar: f64,
    #[serde(default = "default_v_nodes")]
    pub v_nodes: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AprioriSection {
    pub horizons: Vec<f64>,
    pub theta: f64,
    pub rbar: f64,
    #[serde(default = "default_v_nodes")]
    pub v_nodes: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn time_norm_settings(theta: f64, rbar: f64, v_nodes: usize, stride: usize) -> TimeNormSettings {
    let mut ts = TimeNormSettings::new(theta, rbar);
    ts.thermic = ThermicSettings::with_nodes(v_nodes);
    ts.stride = stride;
    ts
}

/// Particle run sharing the solver's law, kernel, grid and initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    pub n_particles: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeanoSection {
    pub base: PeanoConfig,
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
}

/// Top-level configuration file. Each CLI subcommand reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub field: Option<FieldSection>,
    #[serde(default)]
    pub besov: Option<BesovSection>,
    #[serde(default)]
    pub kernel_study: Option<KernelStudy>,
    #[serde(default)]
    pub thresholds: Option<ThresholdSweepConfig>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub apriori: Option<AprioriSection>,
    #[serde(default)]
    pub stability: Option<StabilitySection>,
    #[serde(default)]
    pub particles: Option<ParticleSection>,
    #[serde(default)]
    pub peano: Option<PeanoSection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks of every present section; no numerics.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg_err = |e: String| ExperimentError::Config(e);
        if let Some(s) = &self.solver {
            s.parameter_set().map_err(|e| cfg_err(e.to_string()))?;
            s.build_grid().map_err(|e| cfg_err(e.to_string()))?;
            s.law.validate().map_err(|e| cfg_err(e.to_string()))?;
            s.kernel.validate().map_err(|e| cfg_err(e.to_string()))?;
        }
        if let Some(p) = &self.peano {
            p.base.validate()?;
        }
        if let Some(k) = &self.kernel_study {
            k.grid.build()?;
            k.kernel.validate().map_err(|e| cfg_err(e.to_string()))?;
        }
        if let Some(f) = &self.field {
            f.grid.build()?;
        }
        if let Some(p) = &self.particles {
            if p.n_particles < 2 || !(p.dt > 0.0) {
                return Err(cfg_err("particles need n_particles >= 2 and dt > 0".into()));
            }
            if self.solver.is_none() {
                return Err(cfg_err(
                    "the particles section needs a solver section".into(),
                ));
            }
        }
        for (name, present) in [
            ("apriori", self.apriori.is_some()),
            ("stability", self.stability.is_some()),
        ] {
            if present && self.solver.is_none() {
                return Err(cfg_err(format!(
                    "the {name} section needs a solver section"
                )));
            }
        }
        Ok(())
    }

    pub fn require_solver(&self) -> Result<&SolverConfig, ExperimentError> {
        self.solver
            .as_ref()
            .ok_or_else(|| ExperimentError::Config("missing solver section".into()))
    }
}

/// One line of the pipeline summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub stage: &'static str,
    pub name: String,
    pub passed: bool,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub checks: Vec<Check>,
    /// Set when a stage aborted the run.
    pub halted: Option<String>,
}

impl Summary {
    fn push(
        &mut self,
        stage: &'static str,
        name: impl Into<String>,
        passed: bool,
        value: impl Into<String>,
    ) {
        self.checks.push(Check {
            stage,
            name: name.into(),
            passed,
            value: value.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.halted.is_none() && self.checks.iter().all(|c| c.passed)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["stage", "check", "status", "value"])?;
        for c in &self.checks {
            wr.write_record([
                c.stage,
                &c.name,
                if c.passed { "pass" } else { "fail" },
                &c.value,
            ])?;
        }
        if let Some(h) = &self.halted {
            wr.write_record(["pipeline", "halted", "fail", h])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<fs::File, ExperimentError> {
    Ok(fs::File::create(path)?)
}

/// Runs kernel, threshold gate, solve, a priori sweep, stability study and
/// particle comparison (the last three when their sections are present),
/// writing artifacts under `out`. `summary.csv` is written even when a stage
/// halts the run.
pub fn run_full_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut summary = Summary::default();
    let result = pipeline_stages(cfg, out, &mut summary);
    if let Err(e) = &result {
        summary.halted = Some(e.to_string());
    }
    summary.write_csv(create(&out.join("summary.csv"))?)?;
    result.map(|_| summary)
}

fn pipeline_stages(
    cfg: &ExperimentConfig,
    out: &Path,
    summary: &mut Summary,
) -> Result<(), ExperimentError> {
    let solver = cfg.require_solver()?;
    kernel_stage(solver, out, summary)?;
    threshold_stage(solver, out, summary)?;
    let traj = solve_stage(solver, out, summary)?;
    if let Some(ap) = &cfg.apriori {
        apriori_stage(solver, ap, out, summary)?;
    }
    if let Some(st) = &cfg.stability {
        stability_stage(solver, st, out, summary)?;
    }
    if let Some(pc) = &cfg.particles {
        particle_stage(solver, pc, cfg.seed, &traj, out, summary)?;
    }
    Ok(())
}

/// Realizes the (mollified) kernel and dumps its components under `out/kernel`.
pub fn kernel_stage(
    solver: &SolverConfig,
    out: &Path,
    summary: &mut Summary,
) -> Result<(), ExperimentError> {
    let grid = solver
        .build_grid()
        .map_err(|e| ExperimentError::from_solver("kernel", e))?;
    let kdir = out.join("kernel");
    fs::create_dir_all(&kdir)?;
    let raw =
        realize_kernel(&solver.kernel, &grid).map_err(|e| ExperimentError::stage("kernel", e))?;
    let spatial = match solver.epsilon {
        Some(eps) => {
            mollify(&solver.kernel, &grid, eps, &solver.law)
                .map_err(|e| ExperimentError::stage("kernel", e))?
                .spatial
        }
        None => raw.spatial.clone(),
    };
    let sup = spatial.iter().map(|f| f.max_abs()).fold(0.0, f64::max);
    for (a, f) in spatial.iter().enumerate() {
        f.clone()
            .with_tag(format!("kernel component {a}"))
            .save(&kdir.join(format!("component_{a}.field")))
            .map_err(|e| ExperimentError::stage("kernel", e))?;
    }
    summary.push(
        "kernel",
        "finite sup norm",
        sup.is_finite(),
        format!("{sup:e}"),
    );
    Ok(())
}

/// Writes `thresholds.txt` and refuses to continue when the weak condition
/// fails, unless the solver config carries the override.
pub fn threshold_stage(
    solver: &SolverConfig,
    out: &Path,
    summary: &mut Summary,
) -> Result<ThresholdReport, ExperimentError> {
    let ps = solver
        .parameter_set()
        .map_err(|e| ExperimentError::from_solver("thresholds", e))?;
    let report = check_strong(&ps);
    fs::write(out.join("thresholds.txt"), report.to_string())?;
    let gate_ok = report.weak_ok || solver.override_thresholds;
    summary.push(
        "thresholds",
        "weak condition",
        report.weak_ok,
        report.gamma_gap.to_string(),
    );
    summary.push(
        "thresholds",
        "strong condition (informational)",
        true,
        report.strong_ok.to_string(),
    );
    if !gate_ok {
        return Err(ExperimentError::Gate(format!(
            "gap {} is not positive; rerun with the override flag to explore",
            report.gamma_gap
        )));
    }
    Ok(report)
}

/// Picard solve with trajectory dump, convergence log and invariant checks.
pub fn solve_stage(
    solver: &SolverConfig,
    out: &Path,
    summary: &mut Summary,
) -> Result<DensityTrajectory, ExperimentError> {
    let grid = solver
        .build_grid()
        .map_err(|e| ExperimentError::from_solver("solve", e))?;
    let outcome =
        picard_solve(solver, None).map_err(|e| ExperimentError::from_solver("solve", e))?;
    outcome.write_log(create(&out.join("convergence.csv"))?)?;
    let traj = &outcome.trajectory;
    fs::create_dir_all(out)?;
    traj.write_dir(&out.join("trajectory"))
        .map_err(|e| ExperimentError::stage("solve", e))?;
    summary.push(
        "solve",
        "picard converged",
        outcome.converged,
        format!("{} iterations", outcome.iterations()),
    );
    let mass_err = traj
        .diagnostics()
        .iter()
        .map(|d| (d.mass - 1.0).abs())
        .fold(0.0, f64::max);
    summary.push(
        "solve",
        "mass conservation 1e-6",
        mass_err < 1e-6,
        format!("{mass_err:e}"),
    );
    summary.push(
        "solve",
        "undershoot above -neg_tol",
        outcome.min_value >= -solver.neg_tol,
        format!("{:e}", outcome.min_value),
    );
    let battery = default_test_battery(&grid, solver.t_start, solver.t_end);
    let residual = weak_form_residual(traj, solver, &battery)
        .map_err(|e| ExperimentError::from_solver("solve", e))?;
    summary.push(
        "solve",
        "weak residual below 1e-3",
        residual < 1e-3,
        format!("{residual:e}"),
    );
    if !outcome.converged && !solver.override_thresholds {
        return Err(ExperimentError::Divergence {
            stage: "solve",
            message: format!("no convergence after {} iterations", outcome.iterations()),
        });
    }
    Ok(outcome.trajectory)
}

fn apriori_stage(
    solver: &SolverConfig,
    ap: &AprioriSection,
    out: &Path,
    summary: &mut Summary,
) -> Result<(), ExperimentError> {
    let ts = time_norm_settings(ap.theta, ap.rbar, ap.v_nodes, ap.stride);
    let sweep = apriori_sweep(solver, &ap.horizons, &ts)
        .map_err(|e| ExperimentError::from_solver("apriori", e))?;
    let mut wr = csv::Writer::from_writer(create(&out.join("apriori.csv"))?);
    wr.write_record(["horizon", "plain", "weighted"])?;
    for r in &sweep.reports {
        wr.write_record([
            format!("{:?}", r.horizon),
            format!("{:e}", r.plain),
            format!("{:e}", r.weighted),
        ])?;
    }
    wr.flush()?;
    let finite = sweep
        .reports
        .iter()
        .all(|r| r.plain.is_finite() && r.weighted.is_finite());
    summary.push("apriori", "norms finite", finite, "");
    summary.push(
        "apriori",
        "fitted time exponent positive",
        sweep.theta_fit > 0.0,
        format!("{:.4}", sweep.theta_fit),
    );
    Ok(())
}

fn stability_stage(
    solver: &SolverConfig,
    st: &StabilitySection,
    out: &Path,
    summary: &mut Summary,
) -> Result<(), ExperimentError> {
    if solver.kernel.is_zero() {
        summary.push("stability", "zero kernel: solutions coincide", true, "0");
        return Ok(());
    }
    let ts = time_norm_settings(st.theta, st.rbar, st.v_nodes, st.stride);
    let table = epsilon_stability_study(solver, &st.eps_list, &ts)
        .map_err(|e| ExperimentError::from_solver("stability", e))?;
    table.write_csv(create(&out.join("stability.csv"))?)?;
    summary.push(
        "stability",
        "sup-L1 distances decreasing",
        table.sup_decreasing(),
        "",
    );
    summary.push(
        "stability",
        "sup-L1 last/first below 0.3",
        table.sup_last_over_first() < 0.3,
        format!("{:.4}", table.sup_last_over_first()),
    );
    summary.push(
        "stability",
        "Besov distances decreasing",
        table.besov_decreasing(),
        "",
    );
    summary.push(
        "stability",
        "Besov last/first below 0.3",
        table.besov_last_over_first() < 0.3,
        format!("{:.4}", table.besov_last_over_first()),
    );
    summary.push(
        "stability",
        "solution/kernel ratio spread below 10",
        table.ratio_spread() < 10.0,
        format!("{:.4}", table.ratio_spread()),
    );
    Ok(())
}

/// Particle system with the solver's law, kernel and initial law, compared
/// against `traj` at every trajectory node that falls on the particle time step.
pub fn particle_stage(
    solver: &SolverConfig,
    pc: &ParticleSection,
    seed: u64,
    traj: &DensityTrajectory,
    out: &Path,
    summary: &mut Summary,
) -> Result<Vec<(f64, f64)>, ExperimentError> {
    let grid = solver
        .build_grid()
        .map_err(|e| ExperimentError::from_solver("particles", e))?;
    let kernel = if solver.kernel.is_zero() {
        None
    } else {
        let eps = solver.epsilon.ok_or_else(|| {
            ExperimentError::Config("particle runs need a mollified kernel (set epsilon)".into())
        })?;
        Some(
            mollify(&solver.kernel, &grid, eps, &solver.law)
                .map_err(|e| ExperimentError::stage("particles", e))?,
        )
    };
    let sim = SimConfig {
        n_particles: pc.n_particles,
        dt: pc.dt,
        t_start: solver.t_start,
        horizon: solver.t_end,
        law: solver.law,
        d: grid.dim(),
        kernel,
        seed,
        initial: solver.initial.clone(),
    };
    let record: Vec<f64> = traj
        .times()
        .iter()
        .copied()
        .filter(|&s| {
            let k = ((s - sim.t_start) / sim.dt).round();
            s > sim.t_start && (k * sim.dt - (s - sim.t_start)).abs() < 1e-9
        })
        .collect();
    let run = simulate(&sim, &record, &grid).map_err(|e| ExperimentError::stage("particles", e))?;
    let table = compare_to_pde(&run, traj).map_err(|e| ExperimentError::stage("particles", e))?;
    fs::create_dir_all(out)?;
    let mut wr = csv::Writer::from_writer(create(&out.join("particles.csv"))?);
    wr.write_record(["time", "l1_distance"])?;
    for (s, d) in &table {
        wr.write_record([format!("{s:?}"), format!("{d:e}")])?;
    }
    wr.flush()?;
    run.final_ensemble
        .write_positions_csv(create(&out.join("positions_final.csv"))?)?;
    if let Some(last) = run.densities.last() {
        last.clone()
            .with_tag("particle density at horizon")
            .save(&out.join("particles_final.field"))
            .map_err(|e| ExperimentError::stage("particles", e))?;
    }
    let finite = table.iter().all(|(_, d)| d.is_finite());
    summary.push(
        "particles",
        "distances finite",
        finite,
        format!("{} times", table.len()),
    );
    summary.push(
        "particles",
        "wraps below 0.1% of steps",
        !run.wrap_flagged,
        run.wraps.to_string(),
    );
    let bound = sim.kernel.as_ref().map(|k| k.sup_norm()).unwrap_or(0.0);
    summary.push(
        "particles",
        "drift bounded by kernel sup norm",
        run.max_drift <= bound * (1.0 + 1e-12),
        format!("{:e}", run.max_drift),
    );
    Ok(table)
}

/// Besov norms of the configured field for each index, as CSV.
pub fn run_besov<W: Write>(section: &BesovSection, w: W) -> Result<(), ExperimentError> {
    let f = section.field.build()?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["gamma", "ell", "m", "low", "thermic", "total"])?;
    for idx in &section.indices {
        let parts = besov_parts(&f, idx, &section.law, &section.thermic)
            .map_err(|e| ExperimentError::stage("besov", e))?;
        wr.write_record([
            format!("{:?}", idx.gamma),
            fmt_exponent(idx.ell),
            fmt_exponent(idx.m),
            format!("{:e}", parts.low),
            format!("{:e}", parts.thermic),
            format!("{:e}", parts.total()),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn fmt_exponent(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:?}")
    }
}

/// Mollifier convergence table as CSV, plus one dump per scale under `out`.
pub fn run_kernel_study(
    study: &KernelStudy,
    out: &Path,
) -> Result<crate::kernel::ConvergenceTable, ExperimentError> {
    let grid = study.grid.build()?;
    fs::create_dir_all(out)?;
    let table = mollifier_convergence(
        &study.kernel,
        &grid,
        study.target,
        &study.eps_list,
        &study.law,
        &study.thermic,
    )
    .map_err(|e| ExperimentError::stage("kernel", e))?;
    let mut wr = csv::Writer::from_writer(create(&out.join("mollifier.csv"))?);
    wr.write_record(["eps", "distance"])?;
    for (e, d) in &table.rows {
        wr.write_record([format!("{e:?}"), format!("{d:e}")])?;
    }
    wr.flush()?;
    for (i, &eps) in study.eps_list.iter().enumerate() {
        let m = mollify(&study.kernel, &grid, eps, &study.law)
            .map_err(|e| ExperimentError::stage("kernel", e))?;
        for (a, f) in m.spatial.iter().enumerate() {
            f.clone()
                .with_tag(format!("eps={eps:?} component {a}"))
                .save(&out.join(format!("mollified_{i:02}_{a}.field")))
                .map_err(|e| ExperimentError::stage("kernel", e))?;
        }
    }
    Ok(table)
}

/// Output directory: explicit override, then the config value, then `./out`.
pub fn output_dir(cfg: &ExperimentConfig, cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

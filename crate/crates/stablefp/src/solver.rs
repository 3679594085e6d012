//! Picard iteration for the mild (Duhamel) form of the nonlinear
//! Fokker-Planck equation
//!
//! ```text
//! rho(s) = p_{s-t} * mu - int_t^s grad p_{s-v} * (rho(v) (b(v) * rho(v))) dv
//! ```
//!
//! together with diagnostics on the resulting trajectories.

use std::io::Write;
use std::path::PathBuf;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{besov_norm, weighted_bochner_norm, BesovError, BesovIndex, ThermicSettings};
use crate::grid::{convolve, lp_norm, Field, Grid, GridError, SpectralField};
use crate::kernel::{
    kernel_distance, mollify, realize_kernel, KernelError, KernelSpec, MollifiedKernel,
    RealizedKernel,
};
use crate::semigroup::{grad_symbol, SemigroupError, StableLaw};
use crate::threshold::{
    check_weak, gap, q_to_f64, rational_from_f64, rbar_interval_at, Exponent, ParameterInput,
    ParameterSet, ThresholdError, MAX_DENOMINATOR,
};
use crate::trajectory::{DensityTrajectory, TrajectoryError};
use crate::util::{conjugate, loglog_slope};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameters fail the weak admissibility condition (gap {gap}); pass the override flag to run anyway")]
    ThresholdGate { gap: String },
    #[error("time {s} outside ({t}, {horizon}]")]
    OutOfRange { s: f64, t: f64, horizon: f64 },
    #[error("time {0} is not a node of the time grid")]
    NotANode(f64),
    #[error("trajectory does not match the configured time grid")]
    TrajectoryMismatch,
    #[error("non-finite value at iteration {iteration}, time {s}")]
    NonFinite { iteration: usize, s: f64 },
    #[error("no convergence after {iterations} iterations (last increment {last:.3e})")]
    Diverged { iterations: usize, last: f64 },
    #[error("test function has boundary mass {0:.3e}")]
    NotCompact(f64),
    #[error("test function must vanish at the final time")]
    NotVanishing,
    #[error("need at least {need} members, got {got}")]
    TooFewMembers { need: usize, got: usize },
    #[error("initial law: {0}")]
    Initial(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Besov(#[from] BesovError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Initial distribution `mu`, realized as a unit-mass grid density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Unit mass in the cell nearest to `center`.
    PointMass {
        center: Vec<f64>,
    },
    /// Weighted single-cell atoms.
    Atoms {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        var: f64,
    },
    /// Uniform on the cells whose centers lie in `[lower, upper]`.
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// A field dump on disk.
    File {
        path: PathBuf,
    },
    #[serde(skip)]
    Custom(Field),
}

impl InitialLaw {
    pub fn as_field(&self, grid: &Grid) -> Result<Field, SolverError> {
        let d = grid.dim();
        let check_dim = |v: &[f64]| {
            if v.len() == d {
                Ok(())
            } else {
                Err(SolverError::Initial(format!(
                    "point has {} coordinates, grid has {d}",
                    v.len()
                )))
            }
        };
        let f = match self {
            InitialLaw::PointMass { center } => {
                check_dim(center)?;
                Field::point_mass(grid, center)
            }
            InitialLaw::Atoms { centers, weights } => {
                if centers.len() != weights.len() || centers.is_empty() {
                    return Err(SolverError::Initial(
                        "atoms and weights differ in length".into(),
                    ));
                }
                if weights.iter().any(|&w| !(w >= 0.0)) {
                    return Err(SolverError::Initial("negative weight".into()));
                }
                let mut f = Field::zeros(grid);
                for (c, &w) in centers.iter().zip(weights) {
                    check_dim(c)?;
                    f = f.add(&Field::point_mass(grid, c).scale(w))?;
                }
                f
            }
            InitialLaw::Gaussian { mean, var } => {
                check_dim(mean)?;
                if !(*var > 0.0) {
                    return Err(SolverError::Initial(format!(
                        "variance {var} must be positive"
                    )));
                }
                Field::gaussian(grid, mean, *var)
            }
            InitialLaw::UniformBox { lower, upper } => {
                check_dim(lower)?;
                check_dim(upper)?;
                Field::from_fn(grid, |x| {
                    let inside = (0..d).all(|a| x[a] >= lower[a] && x[a] <= upper[a]);
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            InitialLaw::File { path } => {
                let f = Field::load(path)?;
                if f.grid() != grid {
                    return Err(SolverError::Initial(format!(
                        "{} lives on a different grid",
                        path.display()
                    )));
                }
                f
            }
            InitialLaw::Custom(f) => {
                if f.grid() != grid {
                    return Err(SolverError::Initial(
                        "custom field lives on a different grid".into(),
                    ));
                }
                f.clone()
            }
        };
        if f.values().iter().any(|&v| v < 0.0) {
            return Err(SolverError::Initial("density has negative values".into()));
        }
        let mass = f.integral();
        if !(mass > 0.0) {
            return Err(SolverError::Initial(
                "density has no mass on the grid".into(),
            ));
        }
        let user_given = matches!(self, InitialLaw::File { .. } | InitialLaw::Custom(_));
        if user_given && (mass - 1.0).abs() > 1e-6 {
            return Err(SolverError::Initial(format!("density has mass {mass}")));
        }
        let f = f.scale(1.0 / mass);
        f.warn_boundary("initial law");
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// Nodes at cell midpoints; never touches the singular endpoint.
    #[default]
    Midpoint,
    LeftEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub half_width: f64,
}

fn default_time_nodes() -> usize {
    256
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max() -> usize {
    50
}
fn default_neg_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub params: ParameterInput,
    pub law: StableLaw,
    pub kernel: KernelSpec,
    /// Mollification scale; `None` solves with the grid realization of the raw kernel.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub grid: GridSpec,
    pub initial: InitialLaw,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max")]
    pub picard_max: usize,
    #[serde(default)]
    pub quadrature: Quadrature,
    #[serde(default)]
    pub override_thresholds: bool,
    #[serde(default = "default_neg_tol")]
    pub neg_tol: f64,
}

impl SolverConfig {
    /// One-dimensional config with defaults for the numerical knobs.
    pub fn new_1d(
        params: ParameterInput,
        kernel: KernelSpec,
        epsilon: Option<f64>,
        grid: GridSpec,
        initial: InitialLaw,
        horizon: f64,
    ) -> Self {
        SolverConfig {
            law: StableLaw {
                alpha: params.alpha,
                mode: Default::default(),
            },
            params,
            kernel,
            epsilon,
            grid,
            initial,
            t_start: 0.0,
            t_end: horizon,
            time_nodes: default_time_nodes(),
            picard_tol: default_tol(),
            picard_max: default_max(),
            quadrature: Quadrature::Midpoint,
            override_thresholds: false,
            neg_tol: default_neg_tol(),
        }
    }

    pub fn parameter_set(&self) -> Result<ParameterSet, SolverError> {
        Ok(ParameterSet::from_input(&self.params)?)
    }

    pub fn build_grid(&self) -> Result<Grid, SolverError> {
        Ok(Grid::new(
            self.params.d as usize,
            self.grid.n,
            self.grid.half_width,
        )?)
    }

    pub fn times(&self) -> Vec<f64> {
        DensityTrajectory::uniform_times(self.t_start, self.t_end, self.time_nodes)
    }

    /// Structural checks plus the weak-admissibility gate.
    pub fn validate(&self) -> Result<ParameterSet, SolverError> {
        let ps = self.parameter_set()?;
        self.law.validate()?;
        if (self.law.alpha - self.params.alpha).abs() > 1e-12 {
            return Err(SolverError::Config(format!(
                "noise index {} differs from parameter alpha {}",
                self.law.alpha, self.params.alpha
            )));
        }
        if !(self.t_end > self.t_start) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(SolverError::Config(format!(
                "horizon [{}, {}] is empty",
                self.t_start, self.t_end
            )));
        }
        if self.time_nodes == 0 {
            return Err(SolverError::Config("time_nodes must be positive".into()));
        }
        if !(self.picard_tol > 0.0) || self.picard_max == 0 {
            return Err(SolverError::Config(
                "picard tolerance and budget must be positive".into(),
            ));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(SolverError::Config(format!(
                    "epsilon {eps} must be positive"
                )));
            }
        }
        self.kernel.validate()?;
        self.build_grid()?;
        let g = gap(&ps);
        if g <= num_traits::Zero::zero() {
            if self.override_thresholds {
                log::warn!("running outside the weak admissibility region (gap {g}); convergence is not expected");
            } else {
                return Err(SolverError::ThresholdGate { gap: g.to_string() });
            }
        }
        Ok(ps)
    }
}

enum KernelSource {
    Zero,
    Raw(RealizedKernel),
    Mollified(MollifiedKernel),
}

impl KernelSource {
    fn time_factor(&self, s: f64) -> f64 {
        match self {
            KernelSource::Zero => 0.0,
            KernelSource::Raw(k) => k.profile.value(s),
            KernelSource::Mollified(k) => k.time_factor(s),
        }
    }

    fn spatial(&self) -> &[Field] {
        match self {
            KernelSource::Zero => &[],
            KernelSource::Raw(k) => &k.spatial,
            KernelSource::Mollified(k) => &k.spatial,
        }
    }
}

/// Precomputed spectral tables for one configuration.
struct Engine {
    grid: Grid,
    times: Vec<f64>,
    h: f64,
    quadrature: Quadrature,
    mu: Field,
    mu_hat: Vec<Complex64>,
    psi: Vec<f64>,
    kernel: KernelSource,
    kernel_hat: Vec<Vec<Complex64>>,
    /// `exp(-lag_k psi)` for `k = 1..=M`.
    lag_tables: Vec<Vec<f64>>,
}

impl Engine {
    fn new(cfg: &SolverConfig, initial: &Field) -> Result<Self, SolverError> {
        let grid = *initial.grid();
        let times = cfg.times();
        let m = cfg.time_nodes;
        let h = (cfg.t_end - cfg.t_start) / m as f64;
        let kernel = if cfg.kernel.is_zero() {
            KernelSource::Zero
        } else {
            match cfg.epsilon {
                Some(eps) => KernelSource::Mollified(mollify(&cfg.kernel, &grid, eps, &cfg.law)?),
                None => KernelSource::Raw(realize_kernel(&cfg.kernel, &grid)?),
            }
        };
        let kernel_hat = kernel
            .spatial()
            .iter()
            .map(|f| f.to_spectral().into_coeffs())
            .collect();
        let psi = cfg.law.symbol_table(&grid);
        let lag_tables = if matches!(kernel, KernelSource::Zero) {
            Vec::new()
        } else {
            (1..=m)
                .map(|k| {
                    let lag = match cfg.quadrature {
                        Quadrature::Midpoint => (k as f64 - 0.5) * h,
                        Quadrature::LeftEndpoint => k as f64 * h,
                    };
                    psi.iter().map(|p| (-lag * p).exp()).collect()
                })
                .collect()
        };
        Ok(Engine {
            grid,
            times,
            h,
            quadrature: cfg.quadrature,
            mu: initial.clone(),
            mu_hat: initial.to_spectral().into_coeffs(),
            psi,
            kernel,
            kernel_hat,
            lag_tables,
        })
    }

    fn m(&self) -> usize {
        self.times.len() - 1
    }

    fn free_slice(&self, i: usize) -> Vec<Complex64> {
        let dt = self.times[i] - self.times[0];
        self.mu_hat
            .iter()
            .zip(&self.psi)
            .map(|(c, p)| c * (-dt * p).exp())
            .collect()
    }

    /// Drift `g(v) (b * source)` for each component.
    fn drift(&self, source: &Field, v: f64) -> Vec<Field> {
        let g = self.kernel.time_factor(v);
        let src = source.to_spectral();
        self.kernel_hat
            .iter()
            .map(|kh| {
                let coeffs = kh
                    .iter()
                    .zip(src.coeffs())
                    .map(|(a, b)| a * b * g)
                    .collect();
                SpectralField::from_coeffs(&self.grid, coeffs)
                    .expect("shared grid")
                    .to_physical()
            })
            .collect()
    }

    /// Spectrum of `div(rho B)`.
    fn divergence_spectrum(&self, rho: &Field, source: &Field, v: f64) -> Vec<Complex64> {
        let drift = self.drift(source, v);
        let mut out = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for (a, b) in drift.iter().enumerate() {
            let flux = rho.mul(b).expect("shared grid").to_spectral();
            for (k, (o, c)) in out.iter_mut().zip(flux.coeffs()).enumerate() {
                *o += grad_symbol(&self.grid, k, a) * c;
            }
        }
        out
    }

    /// Quadrature node and the density/drift source used on `[s_j, s_{j+1}]`.
    fn cell(&self, slices: &[Field], j: usize) -> (f64, Field) {
        match self.quadrature {
            Quadrature::Midpoint => (
                self.times[j] + 0.5 * self.h,
                slices[j]
                    .axpby(0.5, &slices[j + 1], 0.5)
                    .expect("shared grid"),
            ),
            Quadrature::LeftEndpoint => (self.times[j], slices[j].clone()),
        }
    }

    /// One Duhamel sweep. `frozen` supplies the drift source instead of `prev`;
    /// `only` restricts the output to a single slice (others are returned as the
    /// free evolution).
    fn sweep(
        &self,
        prev: &[Field],
        frozen: Option<&[Field]>,
        only: Option<usize>,
    ) -> Result<Vec<Field>, usize> {
        let m = self.m();
        let n = self.grid.len();
        let mut acc = vec![vec![Complex64::new(0.0, 0.0); n]; m + 1];
        if !matches!(self.kernel, KernelSource::Zero) {
            let last_cell = only.unwrap_or(m);
            for j in 0..last_cell {
                let (v, rho) = self.cell(prev, j);
                let source = match frozen {
                    Some(fz) => self.cell(fz, j).1,
                    None => rho.clone(),
                };
                let div = self.divergence_spectrum(&rho, &source, v);
                for (i, acc_i) in acc.iter_mut().enumerate().skip(j + 1) {
                    if only.is_some_and(|o| o != i) {
                        continue;
                    }
                    let table = &self.lag_tables[i - j - 1];
                    for ((a, d), e) in acc_i.iter_mut().zip(&div).zip(table) {
                        *a += d * (self.h * e);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(m + 1);
        out.push(self.mu.clone());
        for (i, acc_i) in acc.iter().enumerate().skip(1) {
            let free = self.free_slice(i);
            let coeffs = free.iter().zip(acc_i).map(|(f, a)| f - a).collect();
            let f = SpectralField::from_coeffs(&self.grid, coeffs)
                .expect("shared grid")
                .to_physical();
            if only.is_none_or(|o| o == i) && f.values().iter().any(|v| !v.is_finite()) {
                return Err(i);
            }
            out.push(f);
        }
        Ok(out)
    }

    fn free_evolution(&self) -> Vec<Field> {
        let mut out = vec![self.mu.clone()];
        for i in 1..=self.m() {
            out.push(
                SpectralField::from_coeffs(&self.grid, self.free_slice(i))
                    .expect("shared grid")
                    .to_physical(),
            );
        }
        out
    }
}

fn check_matches(traj: &DensityTrajectory, times: &[f64], grid: &Grid) -> Result<(), SolverError> {
    let span = (times[times.len() - 1] - times[0]).abs();
    let ok = traj.len() == times.len()
        && traj.grid() == grid
        && traj
            .times()
            .iter()
            .zip(times)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * span.max(1.0));
    if ok {
        Ok(())
    } else {
        Err(SolverError::TrajectoryMismatch)
    }
}

/// `b * rho`, componentwise for vector kernels.
pub fn nl_drift(b_slice: &[Field], rho_slice: &Field) -> Result<Vec<Field>, SolverError> {
    b_slice
        .iter()
        .map(|b| Ok(convolve(b, rho_slice)?))
        .collect()
}

/// Free evolution `s -> p_{s-t} * mu` on the configured time grid.
pub fn free_evolution(cfg: &SolverConfig) -> Result<DensityTrajectory, SolverError> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    let engine = Engine::new(cfg, &mu)?;
    Ok(DensityTrajectory::new(
        engine.times.clone(),
        engine.free_evolution(),
    )?)
}

/// Right-hand side of the mild equation at the grid time `s`, built from `traj`.
pub fn duhamel_rhs(
    traj: &DensityTrajectory,
    s: f64,
    cfg: &SolverConfig,
) -> Result<Field, SolverError> {
    cfg.validate()?;
    if !(s > cfg.t_start && s <= cfg.t_end * (1.0 + 1e-12) + 1e-15) {
        return Err(SolverError::OutOfRange {
            s,
            t: cfg.t_start,
            horizon: cfg.t_end,
        });
    }
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    let engine = Engine::new(cfg, &mu)?;
    check_matches(traj, &engine.times, &grid)?;
    let i = traj.node_index(s).ok_or(SolverError::NotANode(s))?;
    let mut out = engine
        .sweep(traj.slices(), None, Some(i))
        .map_err(|_| SolverError::NonFinite { iteration: 0, s })?;
    Ok(out.swap_remove(i))
}

/// Result of a Picard run.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome {
    pub trajectory: DensityTrajectory,
    /// Sup-over-time L1 distance between successive iterates.
    pub increments: Vec<f64>,
    pub converged: bool,
    /// Smallest slice value across the trajectory (negative values are kept).
    pub min_value: f64,
}

impl PicardOutcome {
    pub fn iterations(&self) -> usize {
        self.increments.len()
    }

    /// Ratios of successive increments.
    pub fn ratios(&self) -> Vec<f64> {
        self.increments.windows(2).map(|w| w[1] / w[0]).collect()
    }

    /// Convergence log with header `iteration,increment`.
    pub fn write_log<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "increment"])?;
        for (k, inc) in self.increments.iter().enumerate() {
            wr.write_record([(k + 1).to_string(), format!("{inc:e}")])?;
        }
        wr.flush()
    }

    pub fn into_result(self) -> Result<Self, SolverError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SolverError::Diverged {
                iterations: self.iterations(),
                last: self.increments.last().copied().unwrap_or(f64::NAN),
            })
        }
    }
}

fn sup_l1(a: &[Field], b: &[Field]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let vol = x.grid().cell_volume();
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                * vol
        })
        .fold(0.0, f64::max)
}

fn iterate(
    engine: &Engine,
    cfg: &SolverConfig,
    start: Vec<Field>,
    frozen: Option<&[Field]>,
) -> Result<PicardOutcome, SolverError> {
    let mut current = start;
    let mut increments = Vec::new();
    let mut best: Option<(f64, Vec<Field>)> = None;
    let mut converged = false;
    for k in 1..=cfg.picard_max {
        let next = engine
            .sweep(&current, frozen, None)
            .map_err(|i| SolverError::NonFinite {
                iteration: k,
                s: engine.times[i],
            })?;
        let inc = sup_l1(&current, &next);
        log::debug!("picard iteration {k}: increment {inc:.3e}");
        increments.push(inc);
        current = next;
        if best.as_ref().is_none_or(|(b, _)| inc < *b) {
            best = Some((inc, current.clone()));
        }
        if inc < cfg.picard_tol {
            converged = true;
            break;
        }
    }
    let slices = if converged {
        current
    } else {
        log::warn!(
            "picard iteration did not reach {:.1e} in {} sweeps",
            cfg.picard_tol,
            cfg.picard_max
        );
        best.map(|b| b.1).unwrap_or(current)
    };
    let min_value = slices
        .iter()
        .skip(1)
        .map(|s| s.min())
        .fold(f64::INFINITY, f64::min);
    if min_value < -cfg.neg_tol {
        log::warn!(
            "density undershoot {min_value:.3e} below -{:.1e}",
            cfg.neg_tol
        );
    }
    Ok(PicardOutcome {
        trajectory: DensityTrajectory::new(engine.times.clone(), slices)?,
        increments,
        converged,
        min_value,
    })
}

/// Fixed-point iteration of the mild equation. The default starting guess is
/// the free evolution. Non-convergence is reported through
/// [`PicardOutcome::converged`], not as an error.
pub fn picard_solve(
    cfg: &SolverConfig,
    init_guess: Option<&DensityTrajectory>,
) -> Result<PicardOutcome, SolverError> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    let engine = Engine::new(cfg, &mu)?;
    let start = match init_guess {
        Some(g) => {
            check_matches(g, &engine.times, &grid)?;
            g.slices().to_vec()
        }
        None => engine.free_evolution(),
    };
    iterate(&engine, cfg, start, None)
}

/// Linear equation with the drift frozen at `frozen` (typically a converged
/// solution), started from `initial` instead of the configured law.
pub fn frozen_drift_solve(
    cfg: &SolverConfig,
    frozen: &DensityTrajectory,
    initial: &Field,
) -> Result<PicardOutcome, SolverError> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    if initial.grid() != &grid {
        return Err(SolverError::Initial(
            "initial field lives on a different grid".into(),
        ));
    }
    let engine = Engine::new(cfg, initial)?;
    check_matches(frozen, &engine.times, &grid)?;
    let start = engine.free_evolution();
    iterate(&engine, cfg, start, Some(frozen.slices()))
}

/// Time window of a space-time test function `chi(s) phi(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestWindow {
    /// `((end - s)/(end - start))^3` on `[start, end]`; nonzero at the initial time.
    Ramp { start: f64, end: f64 },
    /// Smooth bump supported in `(start, end)`.
    Bump { start: f64, end: f64 },
}

impl TestWindow {
    /// Value and time derivative at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        match *self {
            TestWindow::Ramp { start, end } => {
                if s >= end {
                    return (0.0, 0.0);
                }
                let w = end - start;
                let u = (end - s) / w;
                (u.powi(3), -3.0 * u * u / w)
            }
            TestWindow::Bump { start, end } => {
                let c = 0.5 * (start + end);
                let w = 0.5 * (end - start);
                let u = (s - c) / w;
                if u.abs() >= 1.0 {
                    return (0.0, 0.0);
                }
                let q = 1.0 - u * u;
                let val = (1.0 - 1.0 / q).exp();
                (val, val * (-2.0 * u / (q * q)) / w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub spatial: Field,
    pub window: TestWindow,
}

/// Smooth compactly supported spatial bump of the given radius.
pub fn spatial_bump(grid: &Grid, center: &[f64], radius: f64) -> Field {
    Field::from_fn(grid, |x| {
        let r2: f64 = x
            .iter()
            .zip(center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (radius * radius);
        if r2 < 1.0 {
            (1.0 - 1.0 / (1.0 - r2)).exp()
        } else {
            0.0
        }
    })
}

/// Five test functions: one ramp reaching the initial time and four bumps
/// localized in space and time.
pub fn default_test_battery(grid: &Grid, t: f64, horizon: f64) -> Vec<TestFunction> {
    let d = grid.dim();
    let l = grid.half_width();
    let at = |x: f64| {
        let mut c = vec![0.0; d];
        c[0] = x;
        c
    };
    let span = horizon - t;
    let quarter = |a: f64, b: f64| TestWindow::Bump {
        start: t + a * span,
        end: t + b * span,
    };
    vec![
        TestFunction {
            spatial: spatial_bump(grid, &at(0.0), 0.4 * l),
            window: TestWindow::Ramp {
                start: t,
                end: horizon,
            },
        },
        TestFunction {
            spatial: spatial_bump(grid, &at(0.1 * l), 0.3 * l),
            window: quarter(0.0, 0.5),
        },
        TestFunction {
            spatial: spatial_bump(grid, &at(-0.1 * l), 0.3 * l),
            window: quarter(0.25, 0.75),
        },
        TestFunction {
            spatial: spatial_bump(grid, &at(0.0), 0.2 * l),
            window: quarter(0.4, 0.6),
        },
        TestFunction {
            spatial: spatial_bump(grid, &at(0.15 * l), 0.5 * l),
            window: quarter(0.5, 1.0),
        },
    ]
}

/// Local cubic interpolation of node values `ys` (uniform spacing `h`, origin
/// `t0`) at time `s`.
fn interp_cubic(ys: &[f64], t0: f64, h: f64, s: f64) -> f64 {
    let m = ys.len() - 1;
    if m == 0 {
        return ys[0];
    }
    let x = (s - t0) / h;
    if m < 3 {
        let j = (x.floor() as usize).min(m - 1);
        let u = x - j as f64;
        return ys[j] * (1.0 - u) + ys[j + 1] * u;
    }
    let j = (x.floor() as isize - 1).clamp(0, m as isize - 3) as usize;
    let mut acc = 0.0;
    for a in 0..4 {
        let mut w = 1.0;
        for b in 0..4 {
            if a != b {
                w *= (x - (j + b) as f64) / (a as f64 - b as f64);
            }
        }
        acc += w * ys[j + a];
    }
    acc
}

/// Sub-intervals per time cell used to integrate the test window.
const WEAK_REFINE: usize = 16;

/// Terms of the weak formulation for one test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakTerms {
    pub initial: f64,
    pub transport: f64,
    pub evolution: f64,
    pub scale: f64,
}

impl WeakTerms {
    pub fn relative(&self) -> f64 {
        (self.initial + self.transport + self.evolution).abs() / self.scale
    }
}

/// Per-slice fluxes `rho B`, shared by all test functions.
struct WeakContext<'a> {
    engine: &'a Engine,
    traj: &'a DensityTrajectory,
    fluxes: Vec<Vec<Field>>,
}

impl<'a> WeakContext<'a> {
    fn new(engine: &'a Engine, traj: &'a DensityTrajectory) -> Result<Self, SolverError> {
        let mut fluxes = Vec::with_capacity(traj.len());
        for (i, &s) in traj.times().iter().enumerate() {
            let rho = traj.slice(i);
            let drift = if matches!(engine.kernel, KernelSource::Zero) {
                Vec::new()
            } else {
                engine.drift(rho, s)
            };
            fluxes.push(drift.iter().map(|b| rho.mul(b)).collect::<Result<_, _>>()?);
        }
        Ok(WeakContext {
            engine,
            traj,
            fluxes,
        })
    }

    fn terms(&self, test: &TestFunction) -> Result<WeakTerms, SolverError> {
        let engine = self.engine;
        let grid = engine.grid;
        if test.spatial.grid() != &grid {
            return Err(GridError::GridMismatch.into());
        }
        let bm = test.spatial.boundary_mass();
        if bm > 1e-6 {
            return Err(SolverError::NotCompact(bm));
        }
        let times = self.traj.times();
        let (t0, horizon) = (times[0], times[times.len() - 1]);
        if test.window.eval(horizon).0 != 0.0 {
            return Err(SolverError::NotVanishing);
        }
        let vol = grid.cell_volume();
        let phi_hat = test.spatial.to_spectral();
        let grad_phi: Vec<Field> = (0..grid.dim())
            .map(|a| phi_hat.multiply(|k| grad_symbol(&grid, k, a)).to_physical())
            .collect();
        // the generator has symbol -psi, so -L phi has symbol +psi
        let minus_gen_phi = phi_hat
            .multiply(|k| Complex64::new(engine.psi[k], 0.0))
            .to_physical();
        let pair = |a: &Field, b: &Field| -> f64 {
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x * y)
                .sum::<f64>()
                * vol
        };
        // spatial pairings at the nodes, smooth in time
        let mut g_phi = Vec::with_capacity(times.len());
        let mut g_gen = Vec::with_capacity(times.len());
        let mut g_tr = Vec::with_capacity(times.len());
        for (i, flux) in self.fluxes.iter().enumerate() {
            let rho = self.traj.slice(i);
            g_phi.push(pair(rho, &test.spatial));
            g_gen.push(pair(rho, &minus_gen_phi));
            g_tr.push(
                flux.iter()
                    .zip(&grad_phi)
                    .map(|(f, g)| pair(f, g))
                    .sum::<f64>(),
            );
        }
        let h = engine.h;
        let (chi0, _) = test.window.eval(t0);
        let initial = -chi0 * pair(&engine.mu, &test.spatial);
        // Simpson on a refined grid; the window is known in closed form
        let nf = WEAK_REFINE * (times.len() - 1);
        let hf = (horizon - t0) / nf as f64;
        let mut transport = 0.0;
        let mut evolution = 0.0;
        let mut scale = initial.abs();
        for k in 0..=nf {
            let s = t0 + k as f64 * hf;
            let (chi, dchi) = test.window.eval(s);
            if chi == 0.0 && dchi == 0.0 {
                continue;
            }
            let w = hf / 3.0
                * if k == 0 || k == nf {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
            let tr = -chi * interp_cubic(&g_tr, t0, h, s);
            let ds = -dchi * interp_cubic(&g_phi, t0, h, s);
            let gen = chi * interp_cubic(&g_gen, t0, h, s);
            transport += w * tr;
            evolution += w * (ds + gen);
            scale += w * (tr.abs() + ds.abs() + gen.abs());
        }
        Ok(WeakTerms {
            initial,
            transport,
            evolution,
            scale,
        })
    }
}

/// Terms `-<mu, phi(t)>`, `-int <rho B, grad phi>` and `int <rho, (-d_s - L) phi>`,
/// with a magnitude scale built from absolute values of the time integrands.
/// Spatial pairings are interpolated cubically between time nodes.
pub fn weak_form_terms(
    traj: &DensityTrajectory,
    cfg: &SolverConfig,
    test: &TestFunction,
) -> Result<WeakTerms, SolverError> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    let engine = Engine::new(cfg, &mu)?;
    check_matches(traj, &engine.times, &grid)?;
    WeakContext::new(&engine, traj)?.terms(test)
}

/// Largest relative weak-form residual over the test functions.
pub fn weak_form_residual(
    traj: &DensityTrajectory,
    cfg: &SolverConfig,
    test_fns: &[TestFunction],
) -> Result<f64, SolverError> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    let engine = Engine::new(cfg, &mu)?;
    check_matches(traj, &engine.times, &grid)?;
    let ctx = WeakContext::new(&engine, traj)?;
    let mut worst: f64 = 0.0;
    for t in test_fns {
        worst = worst.max(ctx.terms(t)?.relative());
    }
    Ok(worst)
}

/// Settings shared by the time-integrated Besov diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeNormSettings {
    /// Fraction of the gap added to the solution regularity `-beta`.
    pub theta: f64,
    pub rbar: f64,
    pub thermic: ThermicSettings,
    /// Use every `stride`-th slice.
    pub stride: usize,
}

impl TimeNormSettings {
    pub fn new(theta: f64, rbar: f64) -> Self {
        TimeNormSettings {
            theta,
            rbar,
            thermic: ThermicSettings::default(),
            stride: 1,
        }
    }

    /// Solution index `B^{-beta + theta Gap}_{p', q'}`.
    fn solution_index(&self, ps: &ParameterSet) -> Result<BesovIndex, SolverError> {
        let gamma = -q_to_f64(&ps.beta) + self.theta * q_to_f64(&gap(ps));
        Ok(BesovIndex::new(
            gamma,
            conjugate(ps.p.to_f64()),
            conjugate(ps.q.to_f64()),
        )?)
    }

    /// Kernel index `B^{beta - theta Gap}_{p, q}`.
    fn kernel_index(&self, ps: &ParameterSet) -> Result<BesovIndex, SolverError> {
        let gamma = q_to_f64(&ps.beta) - self.theta * q_to_f64(&gap(ps));
        Ok(BesovIndex::new(gamma, ps.p.to_f64(), ps.q.to_f64())?)
    }

    fn check_rbar(&self, ps: &ParameterSet) -> Result<(), SolverError> {
        let theta = rational_from_f64(self.theta, MAX_DENOMINATOR)?;
        let rbar = Exponent::from_f64(self.rbar)?;
        let iv = rbar_interval_at(ps, theta)?;
        match iv {
            Some(iv) if iv.contains(&rbar) => Ok(()),
            _ => Err(ThresholdError::RbarOutOfRange {
                rbar: rbar.to_string(),
                lower: ps.r.conjugate().to_string(),
                upper: iv
                    .map(|i| i.upper.to_string())
                    .unwrap_or_else(|| "empty".into()),
            }
            .into()),
        }
    }
}

/// `(sum_i h |f_i|^rbar)^{1/rbar}` over slices `1..`, subsampled by `stride`.
fn time_lebesgue_norm(
    slices: &[Field],
    h: f64,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &TimeNormSettings,
) -> Result<f64, SolverError> {
    let stride = ts.stride.max(1);
    let mut acc = 0.0;
    for f in slices.iter().skip(1).step_by(stride) {
        let n = besov_norm(f, idx, law, &ts.thermic)?;
        acc += stride as f64 * h * n.powf(ts.rbar);
    }
    Ok(acc.powf(1.0 / ts.rbar))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AprioriReport {
    pub horizon: f64,
    pub index: BesovIndex,
    /// `(int_t^T |rho(s)|^rbar ds)^{1/rbar}`.
    pub plain: f64,
    /// Weighted norm with weight `(T - s)^{-rbar/alpha}` over `[s_1, T)`.
    pub weighted: f64,
}

/// Time-integrated Besov norms of `traj` at regularity `-beta + theta Gap`.
pub fn apriori_report(
    traj: &DensityTrajectory,
    cfg: &SolverConfig,
    ts: &TimeNormSettings,
) -> Result<AprioriReport, SolverError> {
    let ps = cfg.validate()?;
    ts.check_rbar(&ps)?;
    let idx = ts.solution_index(&ps)?;
    let times = traj.times();
    if times.len() < 3 {
        return Err(SolverError::TooFewMembers {
            need: 3,
            got: times.len(),
        });
    }
    let h = times[1] - times[0];
    let plain = time_lebesgue_norm(traj.slices(), h, &idx, &cfg.law, ts)?;
    let stride = ts.stride.max(1);
    let sel: Vec<usize> = (1..times.len()).step_by(stride).collect();
    let mut sub_times: Vec<f64> = sel.iter().map(|&i| times[i]).collect();
    let mut sub_slices: Vec<Field> = sel.iter().map(|&i| traj.slice(i).clone()).collect();
    let horizon = times[times.len() - 1];
    if sub_times.last() != Some(&horizon) {
        sub_times.push(horizon);
        sub_slices.push(traj.slice(times.len() - 1).clone());
    }
    let sub = DensityTrajectory::new(sub_times, sub_slices)?;
    let weighted = weighted_bochner_norm(&sub, ts.rbar, &idx, &cfg.law, &ts.thermic, horizon)?;
    Ok(AprioriReport {
        horizon: horizon - times[0],
        index: idx,
        plain,
        weighted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AprioriSweep {
    pub reports: Vec<AprioriReport>,
    /// Log-log slope of the plain norm raised to `rbar` against the horizon.
    pub theta_fit: f64,
}

/// Solves for each horizon and fits `int |rho|^rbar ~ C (T - t)^theta`.
pub fn apriori_sweep(
    cfg: &SolverConfig,
    horizons: &[f64],
    ts: &TimeNormSettings,
) -> Result<AprioriSweep, SolverError> {
    if horizons.len() < 2 {
        return Err(SolverError::TooFewMembers {
            need: 2,
            got: horizons.len(),
        });
    }
    let mut reports = Vec::new();
    for &hz in horizons {
        let mut c = cfg.clone();
        c.t_end = c.t_start + hz;
        let out = picard_solve(&c, None)?.into_result()?;
        reports.push(apriori_report(&out.trajectory, &c, ts)?);
    }
    let xs: Vec<f64> = reports.iter().map(|r| r.horizon).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.plain.powf(ts.rbar)).collect();
    Ok(AprioriSweep {
        theta_fit: loglog_slope(&xs, &ys),
        reports,
    })
}

/// One row of the stability table: consecutive scales `eps_prev -> eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyRow {
    pub eps_prev: f64,
    pub eps: f64,
    pub sup_l1: f64,
    pub besov: f64,
    pub kernel: f64,
}

impl CauchyRow {
    pub fn sup_ratio(&self) -> f64 {
        self.sup_l1 / self.kernel
    }

    pub fn besov_ratio(&self) -> f64 {
        self.besov / self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyTable {
    pub rows: Vec<CauchyRow>,
    pub solution_index: BesovIndex,
    pub kernel_index: BesovIndex,
}

fn spread(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, 0.0f64), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    hi / lo
}

impl CauchyTable {
    pub fn sup_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].sup_l1 < w[0].sup_l1)
    }

    pub fn besov_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].besov < w[0].besov)
    }

    pub fn sup_last_over_first(&self) -> f64 {
        self.rows[self.rows.len() - 1].sup_l1 / self.rows[0].sup_l1
    }

    pub fn besov_last_over_first(&self) -> f64 {
        self.rows[self.rows.len() - 1].besov / self.rows[0].besov
    }

    /// Max/min of solution-distance over kernel-distance, worst of both norms.
    pub fn ratio_spread(&self) -> f64 {
        spread(self.rows.iter().map(CauchyRow::sup_ratio))
            .max(spread(self.rows.iter().map(CauchyRow::besov_ratio)))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "eps_prev",
            "eps",
            "sup_l1",
            "besov",
            "kernel",
            "sup_ratio",
            "besov_ratio",
        ])?;
        for r in &self.rows {
            wr.write_record([
                format!("{:?}", r.eps_prev),
                format!("{:?}", r.eps),
                format!("{:e}", r.sup_l1),
                format!("{:e}", r.besov),
                format!("{:e}", r.kernel),
                format!("{:e}", r.sup_ratio()),
                format!("{:e}", r.besov_ratio()),
            ])?;
        }
        wr.flush()
    }
}

/// Solves at each mollification scale and tabulates distances between
/// consecutive solutions and consecutive kernels. The time profile is left
/// out of the kernel distance.
pub fn epsilon_stability_study(
    cfg: &SolverConfig,
    eps_list: &[f64],
    ts: &TimeNormSettings,
) -> Result<CauchyTable, SolverError> {
    if eps_list.len() < 3 {
        return Err(SolverError::TooFewMembers {
            need: 3,
            got: eps_list.len(),
        });
    }
    let ps = cfg.validate()?;
    if gap(&ps) <= num_traits::Zero::zero() {
        return Err(SolverError::ThresholdGate {
            gap: gap(&ps).to_string(),
        });
    }
    ts.check_rbar(&ps)?;
    let sol_idx = ts.solution_index(&ps)?;
    let ker_idx = ts.kernel_index(&ps)?;
    let grid = cfg.build_grid()?;
    let mut members: Vec<(f64, DensityTrajectory, Vec<Field>)> = Vec::new();
    for &eps in eps_list {
        let mut c = cfg.clone();
        c.epsilon = Some(eps);
        let out = picard_solve(&c, None)?.into_result()?;
        let kernel = mollify(&c.kernel, &grid, eps, &c.law)?.spatial;
        log::info!("epsilon {eps}: {} picard iterations", out.iterations());
        members.push((eps, out.trajectory, kernel));
    }
    let mut rows = Vec::new();
    for w in members.windows(2) {
        let (e0, a, ka) = &w[0];
        let (e1, b, kb) = &w[1];
        let diff: Vec<Field> = a
            .slices()
            .iter()
            .zip(b.slices())
            .map(|(x, y)| x.sub(y))
            .collect::<Result<_, _>>()?;
        let h = a.times()[1] - a.times()[0];
        rows.push(CauchyRow {
            eps_prev: *e0,
            eps: *e1,
            sup_l1: a.sup_l1_distance(b)?,
            besov: time_lebesgue_norm(&diff, h, &sol_idx, &cfg.law, ts)?,
            kernel: kernel_distance(ka, kb, &ker_idx, &cfg.law, &ts.thermic)?,
        });
    }
    Ok(CauchyTable {
        rows,
        solution_index: sol_idx,
        kernel_index: ker_idx,
    })
}

/// Sup-L1 distance between the fixed points reached from the free evolution
/// and from the free evolution of a perturbed initial law (its first slice
/// reset to the true initial law).
pub fn uniqueness_probe(cfg: &SolverConfig) -> Result<f64, SolverError> {
    let ps = cfg.validate()?;
    if !check_weak(&ps).weak_ok {
        return Err(SolverError::ThresholdGate {
            gap: gap(&ps).to_string(),
        });
    }
    let first = picard_solve(cfg, None)?.into_result()?;
    let grid = cfg.build_grid()?;
    let mu = cfg.initial.as_field(&grid)?;
    // mix in an off-center Gaussian
    let mut center = vec![0.0; grid.dim()];
    center[0] = 0.1 * grid.half_width();
    let bump = Field::gaussian(&grid, &center, 0.5);
    let perturbed = mu.axpby(0.5, &bump.scale(1.0 / bump.integral()), 0.5)?;
    let mut alt = cfg.clone();
    alt.initial = InitialLaw::Custom(perturbed.scale(1.0 / perturbed.integral()));
    let mut guess = free_evolution(&alt)?;
    guess = guess.with_slice(0, mu)?;
    let second = picard_solve(cfg, Some(&guess))?.into_result()?;
    Ok(first.trajectory.sup_l1_distance(&second.trajectory)?)
}

/// L1 distance between two fields; shorthand used by callers comparing slices.
pub fn l1_distance(a: &Field, b: &Field) -> Result<f64, SolverError> {
    Ok(lp_norm(&a.sub(b)?, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_1d(
        kernel: KernelSpec,
        eps: Option<f64>,
        initial: InitialLaw,
        horizon: f64,
        m: usize,
    ) -> SolverConfig {
        let params = ParameterInput {
            alpha: 2.0,
            beta: -0.5,
            p: f64::INFINITY,
            q: f64::INFINITY,
            r: f64::INFINITY,
            d: 1,
        };
        let mut c = SolverConfig::new_1d(
            params,
            kernel,
            eps,
            GridSpec {
                n: 256,
                half_width: 8.0,
            },
            initial,
            horizon,
        );
        c.time_nodes = m;
        c
    }

    fn gaussian() -> InitialLaw {
        InitialLaw::Gaussian {
            mean: vec![0.0],
            var: 0.5,
        }
    }

    #[test]
    fn initial_laws_have_unit_mass() {
        let g = Grid::new(1, 128, 5.0).unwrap();
        for law in [
            InitialLaw::PointMass { center: vec![0.3] },
            InitialLaw::Atoms {
                centers: vec![vec![-1.0], vec![2.0]],
                weights: vec![1.0, 3.0],
            },
            gaussian(),
            InitialLaw::UniformBox {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
        ] {
            let f = law.as_field(&g).unwrap();
            assert!((f.integral() - 1.0).abs() < 1e-10);
            assert!(f.min() >= 0.0);
        }
        let bad = InitialLaw::Custom(Field::constant(&g, 1.0));
        assert!(matches!(bad.as_field(&g), Err(SolverError::Initial(_))));
        assert!(InitialLaw::PointMass {
            center: vec![0.0, 0.0]
        }
        .as_field(&g)
        .is_err());
    }

    #[test]
    fn zero_drift_converges_in_one_sweep() {
        let c = cfg_1d(KernelSpec::zero(), None, gaussian(), 0.5, 32);
        let out = picard_solve(&c, None).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations(), 1);
        let free = free_evolution(&c).unwrap();
        assert_eq!(out.trajectory.sup_l1_distance(&free).unwrap(), 0.0);
    }

    #[test]
    fn nl_drift_of_constant_kernel_is_constant() {
        let g = Grid::new(1, 128, 6.0).unwrap();
        let rho = Field::gaussian(&g, &[0.5], 0.3);
        let b = vec![Field::constant(&g, 0.7)];
        let out = nl_drift(&b, &rho).unwrap();
        assert!(out[0].values().iter().all(|v| (v - 0.7).abs() < 1e-10));
        let z = nl_drift(&[Field::zeros(&g)], &rho).unwrap();
        assert_eq!(z[0].max_abs(), 0.0);
    }

    #[test]
    fn duhamel_rhs_conserves_mass() {
        let c = cfg_1d(KernelSpec::power(-0.5), Some(0.1), gaussian(), 0.25, 32);
        let free = free_evolution(&c).unwrap();
        for s in [c.times()[1], c.times()[17], 0.25] {
            let f = duhamel_rhs(&free, s, &c).unwrap();
            assert!((f.integral() - 1.0).abs() < 1e-8);
        }
        assert!(matches!(
            duhamel_rhs(&free, 0.0, &c),
            Err(SolverError::OutOfRange { .. })
        ));
        assert!(matches!(
            duhamel_rhs(&free, 0.1001, &c),
            Err(SolverError::NotANode(_))
        ));
    }

    #[test]
    fn threshold_gate_and_override() {
        let mut c = cfg_1d(KernelSpec::power(-0.5), Some(0.1), gaussian(), 0.1, 8);
        c.params.beta = -1.0;
        assert!(matches!(
            c.validate(),
            Err(SolverError::ThresholdGate { .. })
        ));
        c.override_thresholds = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn weak_residual_of_free_evolution_is_small() {
        let c = cfg_1d(KernelSpec::zero(), None, gaussian(), 0.5, 64);
        let g = c.build_grid().unwrap();
        let traj = free_evolution(&c).unwrap();
        let battery = default_test_battery(&g, 0.0, 0.5);
        let res = weak_form_residual(&traj, &c, &battery).unwrap();
        assert!(res < 1e-6, "{res}");
        let wide = TestFunction {
            spatial: Field::constant(&g, 1.0),
            window: TestWindow::Ramp {
                start: 0.0,
                end: 0.5,
            },
        };
        assert!(matches!(
            weak_form_residual(&traj, &c, &[wide]),
            Err(SolverError::NotCompact(_))
        ));
    }

    #[test]
    fn test_window_derivatives() {
        for w in [
            TestWindow::Ramp {
                start: 0.0,
                end: 1.0,
            },
            TestWindow::Bump {
                start: 0.2,
                end: 0.8,
            },
        ] {
            for s in [0.3, 0.45, 0.6] {
                let e = 1e-6;
                let fd = (w.eval(s + e).0 - w.eval(s - e).0) / (2.0 * e);
                assert!((fd - w.eval(s).1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = cfg_1d(KernelSpec::power(-0.5), Some(0.1), gaussian(), 0.25, 64);
        let js = serde_json::to_string(&c).unwrap();
        let back: SolverConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(back, c);
        let with_extra = js.replacen('{', "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<SolverConfig>(&with_extra).is_err());
    }

    #[test]
    fn convergence_log_layout() {
        let c = cfg_1d(KernelSpec::constant(vec![1.0]), None, gaussian(), 0.25, 16);
        let out = picard_solve(&c, None).unwrap();
        let mut buf = Vec::new();
        out.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,increment\n"));
        assert_eq!(text.lines().count(), out.iterations() + 1);
    }
}

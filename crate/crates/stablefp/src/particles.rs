//! Interacting particle approximation of the mollified McKean-Vlasov
//! dynamics: Euler steps with stable increments and a pairwise drift averaged
//! over the empirical measure.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::grid::{Field, Grid, GridError};
use crate::kernel::MollifiedKernel;
use crate::semigroup::{NoiseMode, SemigroupError, StableLaw};
use crate::solver::InitialLaw;
use crate::trajectory::DensityTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("need at least two particles, got {0}")]
    TooFewParticles(usize),
    #[error("time step {0} must be positive")]
    BadStep(f64),
    #[error("dimension {0} outside 1..=3")]
    BadDimension(usize),
    #[error("kernel grid is {kernel}-dimensional, particles are {particles}-dimensional")]
    DimensionMismatch { kernel: usize, particles: usize },
    #[error("non-finite particle position")]
    NonFinite,
    #[error("{outside} of {total} particles fall outside the grid")]
    OutsideGrid { outside: usize, total: usize },
    #[error("record time {0} is not a multiple of the time step")]
    OffStep(f64),
    #[error("no PDE slice at time {0}")]
    MissingTime(f64),
    #[error("initial law cannot be sampled: {0}")]
    Initial(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
}

/// Positive stable variable with Laplace transform `exp(-lambda^a)`, `0 < a < 1`
/// (Kanter's representation).
fn positive_stable<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let theta = PI * rng.random::<f64>();
    let e: f64 = Exp1.sample(rng);
    let num = (a * theta).sin() / theta.sin().powf(1.0 / a);
    let tail = ((1.0 - a) * theta).sin() / e;
    num * tail.powf((1.0 - a) / a)
}

/// Symmetric stable variable with characteristic function `exp(-|xi|^alpha)`
/// (Chambers-Mallows-Stuck).
fn symmetric_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    (alpha * v).sin() / v.cos().powf(1.0 / alpha)
        * ((v - alpha * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Increment of the driving process over a step `dt`, with characteristic
/// function `exp(-dt psi(xi))`.
pub fn sample_stable_increment<R: Rng + ?Sized>(
    law: &StableLaw,
    dt: f64,
    d: usize,
    rng: &mut R,
) -> Vec<f64> {
    let alpha = law.alpha;
    if alpha == 2.0 {
        let sd = (2.0 * dt).sqrt();
        return (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                sd * g
            })
            .collect();
    }
    let scale = dt.powf(1.0 / alpha);
    match law.mode {
        NoiseMode::Isotropic => {
            let a = positive_stable(alpha / 2.0, rng);
            let amp = scale * (2.0 * a).sqrt();
            (0..d)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    amp * g
                })
                .collect()
        }
        NoiseMode::CoordinateProduct => (0..d)
            .map(|_| scale * symmetric_stable(alpha, rng))
            .collect(),
    }
}

/// Draws one point from an initial law.
pub fn sample_initial<R: Rng + ?Sized>(
    law: &InitialLaw,
    d: usize,
    rng: &mut R,
) -> Result<Vec<f64>, ParticleError> {
    let check = |v: &[f64]| {
        if v.len() == d {
            Ok(())
        } else {
            Err(ParticleError::Initial(format!(
                "point has {} coordinates, expected {d}",
                v.len()
            )))
        }
    };
    match law {
        InitialLaw::PointMass { center } => {
            check(center)?;
            Ok(center.clone())
        }
        InitialLaw::Atoms { centers, weights } => {
            let total: f64 = weights.iter().sum();
            if centers.is_empty() || centers.len() != weights.len() || !(total > 0.0) {
                return Err(ParticleError::Initial("bad atom weights".into()));
            }
            let mut u = rng.random::<f64>() * total;
            for (c, w) in centers.iter().zip(weights) {
                if u < *w {
                    check(c)?;
                    return Ok(c.clone());
                }
                u -= w;
            }
            Ok(centers[centers.len() - 1].clone())
        }
        InitialLaw::Gaussian { mean, var } => {
            check(mean)?;
            let sd = var.sqrt();
            Ok(mean
                .iter()
                .map(|m| {
                    let g: f64 = StandardNormal.sample(rng);
                    m + sd * g
                })
                .collect())
        }
        InitialLaw::UniformBox { lower, upper } => {
            check(lower)?;
            check(upper)?;
            Ok(lower
                .iter()
                .zip(upper)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect())
        }
        InitialLaw::File { .. } | InitialLaw::Custom(_) => Err(ParticleError::Initial(
            "only point, atom, Gaussian and box laws can be sampled".into(),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_start: f64,
    pub horizon: f64,
    pub law: StableLaw,
    pub d: usize,
    /// `None` means zero drift.
    pub kernel: Option<MollifiedKernel>,
    pub seed: u64,
    pub initial: InitialLaw,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ParticleError> {
        if self.n_particles < 2 {
            return Err(ParticleError::TooFewParticles(self.n_particles));
        }
        if !(self.dt > 0.0) {
            return Err(ParticleError::BadStep(self.dt));
        }
        if !(1..=3).contains(&self.d) {
            return Err(ParticleError::BadDimension(self.d));
        }
        self.law.validate()?;
        if let Some(k) = &self.kernel {
            let kd = k.spatial[0].grid().dim();
            if kd != self.d {
                return Err(ParticleError::DimensionMismatch {
                    kernel: kd,
                    particles: self.d,
                });
            }
        }
        Ok(())
    }

    /// Number of Euler steps to reach the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon - self.t_start) / self.dt).round() as usize
    }
}

/// Tabulated kernel with periodic linear interpolation.
struct KernelTable {
    grid: Grid,
    values: Vec<Vec<f64>>,
}

impl KernelTable {
    fn new(k: &MollifiedKernel) -> Self {
        KernelTable {
            grid: *k.spatial[0].grid(),
            values: k.spatial.iter().map(|f| f.values().to_vec()).collect(),
        }
    }

    /// Adds `b(z)` to `out` (no time factor).
    #[inline]
    fn add_at(&self, z: &[f64], out: &mut [f64]) {
        let n = self.grid.n();
        let l = self.grid.half_width();
        let dx = self.grid.dx();
        let mask = n - 1;
        match self.grid.dim() {
            1 => {
                let u = (z[0] + l) / dx;
                let fl = u.floor();
                let w = u - fl;
                let i0 = (fl as i64).rem_euclid(n as i64) as usize;
                let i1 = (i0 + 1) & mask;
                let v = &self.values[0];
                out[0] += v[i0] * (1.0 - w) + v[i1] * w;
            }
            _ => {
                let u = (z[0] + l) / dx;
                let v = (z[1] + l) / dx;
                let (fu, fv) = (u.floor(), v.floor());
                let (wu, wv) = (u - fu, v - fv);
                let r0 = (fu as i64).rem_euclid(n as i64) as usize;
                let c0 = (fv as i64).rem_euclid(n as i64) as usize;
                let (r1, c1) = ((r0 + 1) & mask, (c0 + 1) & mask);
                for (a, tab) in self.values.iter().enumerate() {
                    out[a] += tab[r0 * n + c0] * (1.0 - wu) * (1.0 - wv)
                        + tab[r1 * n + c0] * wu * (1.0 - wv)
                        + tab[r0 * n + c1] * (1.0 - wu) * wv
                        + tab[r1 * n + c1] * wu * wv;
                }
            }
        }
    }
}

/// Particle positions with one noise stream per particle index.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    d: usize,
    time: f64,
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
    wraps: u64,
    steps: u64,
    max_drift: f64,
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl ParticleEnsemble {
    /// Samples the initial cloud; particle `i` draws from stream `i` of `seed`.
    pub fn initialize(cfg: &SimConfig) -> Result<Self, ParticleError> {
        cfg.validate()?;
        let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n_particles).map(|i| stream(cfg.seed, i)).collect();
        let mut positions = Vec::with_capacity(cfg.n_particles * cfg.d);
        for rng in rngs.iter_mut() {
            positions.extend(sample_initial(&cfg.initial, cfg.d, rng)?);
        }
        Ok(ParticleEnsemble {
            positions,
            d: cfg.d,
            time: cfg.t_start,
            seed: cfg.seed,
            rngs,
            wraps: 0,
            steps: 0,
            max_drift: 0.0,
        })
    }

    /// Ensemble at given positions (row-major `N x d`).
    pub fn from_positions(
        positions: Vec<f64>,
        d: usize,
        time: f64,
        seed: u64,
    ) -> Result<Self, ParticleError> {
        if !(1..=3).contains(&d) {
            return Err(ParticleError::BadDimension(d));
        }
        let n = positions.len() / d;
        if n < 2 || !positions.len().is_multiple_of(d) {
            return Err(ParticleError::TooFewParticles(n));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(ParticleError::NonFinite);
        }
        Ok(ParticleEnsemble {
            positions,
            d,
            time,
            seed,
            rngs: (0..n).map(|i| stream(seed, i)).collect(),
            wraps: 0,
            steps: 0,
            max_drift: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    /// Number of periodic wraps applied so far.
    pub fn wraps(&self) -> u64 {
        self.wraps
    }

    /// Largest drift magnitude (max over coordinates) seen in any step.
    pub fn max_drift(&self) -> f64 {
        self.max_drift
    }

    /// Whether wraps exceeded 0.1% of particle steps.
    pub fn wrap_flagged(&self) -> bool {
        let total = self.steps as f64 * self.len() as f64;
        total > 0.0 && self.wraps as f64 > 1e-3 * total
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.d)
            .map(|a| self.positions.iter().skip(a).step_by(self.d).sum::<f64>() / n)
            .collect()
    }

    /// CSV with header `particle,x1,...`.
    pub fn write_positions_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["particle".to_string()];
        header.extend((1..=self.d).map(|a| format!("x{a}")));
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.particle(i).iter().map(|x| format!("{x:?}")));
            wr.write_record(&row)?;
        }
        wr.flush()
    }
}

/// `(1/N) sum_j b(z_i - z_j)` for every particle, without the time factor.
fn pairwise_drift(positions: &[f64], d: usize, table: &KernelTable) -> Vec<f64> {
    if d == 1 && table.grid.dim() == 1 {
        let reach = 8.0 * table.grid.half_width();
        if positions.iter().all(|x| x.abs() <= reach) {
            return pairwise_drift_1d(positions, table);
        }
    }
    let n = positions.len() / d;
    let mut out = vec![0.0; n * d];
    let mut z = [0.0; 3];
    for i in 0..n {
        let xi = &positions[i * d..(i + 1) * d];
        let acc = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let xj = &positions[j * d..(j + 1) * d];
            for a in 0..d {
                z[a] = xi[a] - xj[a];
            }
            table.add_at(&z[..d], acc);
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
    }
    out
}

/// One-dimensional fast path: cell index by truncation after a positive shift
/// of a whole number of periods, with (value, slope) pairs per cell.
fn pairwise_drift_1d(positions: &[f64], table: &KernelTable) -> Vec<f64> {
    let grid = table.grid;
    let n_cells = grid.n();
    let mask = n_cells - 1;
    let inv = 1.0 / grid.dx();
    let v = &table.values[0];
    let cells: Vec<(f64, f64)> = (0..n_cells)
        .map(|k| (v[k], v[(k + 1) & mask] - v[k]))
        .collect();
    let u: Vec<f64> = positions.iter().map(|x| x * inv).collect();
    // |x_i - x_j| <= 16 L = 8 periods
    let offset = (n_cells / 2 + 8 * n_cells) as f64;
    let n = positions.len() as f64;
    u.iter()
        .map(|&ui| {
            let shifted = ui + offset;
            let mut acc = 0.0;
            for &uj in &u {
                let t = shifted - uj;
                let k = t as usize;
                let w = t - k as f64;
                let (a, slope) = cells[k & mask];
                acc += a + slope * w;
            }
            acc / n
        })
        .collect()
}

/// Drift felt by each particle under `b(s, .)` averaged over the cloud.
pub fn empirical_drift(ens: &ParticleEnsemble, kernel: &MollifiedKernel, s: f64) -> Vec<f64> {
    let table = KernelTable::new(kernel);
    let g = kernel.time_factor(s);
    pairwise_drift(&ens.positions, ens.d, &table)
        .into_iter()
        .map(|v| v * g)
        .collect()
}

fn step_with(
    ens: &mut ParticleEnsemble,
    cfg: &SimConfig,
    table: Option<&KernelTable>,
) -> Result<(), ParticleError> {
    let d = ens.d;
    let dt = cfg.dt;
    if let (Some(table), Some(k)) = (table, &cfg.kernel) {
        let g = k.time_factor(ens.time);
        let drift = pairwise_drift(&ens.positions, d, table);
        for (x, b) in ens.positions.iter_mut().zip(&drift) {
            let v = g * b;
            ens.max_drift = ens.max_drift.max(v.abs());
            *x += v * dt;
        }
    }
    let l = match &cfg.kernel {
        Some(k) => k.spatial[0].grid().half_width(),
        None => f64::INFINITY,
    };
    for (i, rng) in ens.rngs.iter_mut().enumerate() {
        let inc = sample_stable_increment(&cfg.law, dt, d, rng);
        for (a, dx) in inc.iter().enumerate() {
            let x = &mut ens.positions[i * d + a];
            *x += dx;
            if !x.is_finite() {
                return Err(ParticleError::NonFinite);
            }
            if l.is_finite() && (*x < -l || *x >= l) {
                *x = (*x + l).rem_euclid(2.0 * l) - l;
                ens.wraps += 1;
            }
        }
    }
    ens.time += dt;
    ens.steps += 1;
    Ok(())
}

/// One Euler step: drift from the positions at the start of the step, then an
/// independent stable increment per particle. Particles leaving the kernel box
/// `[-L, L)^d` are wrapped periodically and counted.
pub fn step(ens: &ParticleEnsemble, cfg: &SimConfig) -> Result<ParticleEnsemble, ParticleError> {
    let mut next = ens.clone();
    let table = cfg.kernel.as_ref().map(KernelTable::new);
    step_with(&mut next, cfg, table.as_ref())?;
    Ok(next)
}

/// Histogram on the grid cells (centered at the nodes), normalized to mass 1.
pub fn empirical_density(ens: &ParticleEnsemble, grid: &Grid) -> Result<Field, ParticleError> {
    if grid.dim() != ens.d {
        return Err(GridError::GridMismatch.into());
    }
    let n = grid.n();
    let l = grid.half_width();
    let dx = grid.dx();
    let mut counts = vec![0.0; grid.len()];
    let mut outside = 0usize;
    for i in 0..ens.len() {
        let p = ens.particle(i);
        let mut flat = 0usize;
        let mut ok = true;
        for &x in p {
            let k = ((x + l) / dx).round();
            if k < 0.0 || k >= n as f64 {
                ok = false;
                break;
            }
            flat = flat * n + k as usize;
        }
        if ok {
            counts[flat] += 1.0;
        } else {
            outside += 1;
        }
    }
    if outside as f64 > 0.01 * ens.len() as f64 {
        return Err(ParticleError::OutsideGrid {
            outside,
            total: ens.len(),
        });
    }
    let inside = (ens.len() - outside) as f64;
    let w = 1.0 / (inside * grid.cell_volume());
    Ok(Field::from_values(
        grid,
        counts.into_iter().map(|c| c * w).collect(),
    )?)
}

/// Binned densities at the recorded times.
#[derive(Debug, Clone)]
pub struct ParticleRun {
    pub times: Vec<f64>,
    pub densities: Vec<Field>,
    pub final_ensemble: ParticleEnsemble,
    pub wraps: u64,
    pub wrap_flagged: bool,
    pub max_drift: f64,
}

/// Runs to the horizon, binning on `grid` at each requested time.
pub fn simulate(
    cfg: &SimConfig,
    record_times: &[f64],
    grid: &Grid,
) -> Result<ParticleRun, ParticleError> {
    cfg.validate()?;
    let mut record_steps = Vec::with_capacity(record_times.len());
    for &tau in record_times {
        let k = ((tau - cfg.t_start) / cfg.dt).round();
        if k < 0.0 || ((k * cfg.dt) - (tau - cfg.t_start)).abs() > 1e-9 * cfg.dt.max(1.0) {
            return Err(ParticleError::OffStep(tau));
        }
        record_steps.push(k as usize);
    }
    if let Some(k) = &cfg.kernel {
        let kg = k.spatial[0].grid();
        let sup = k.sup_norm();
        if sup > 0.0 && cfg.dt > 0.1 * kg.dx() / sup {
            log::warn!(
                "time step {} exceeds 0.1 dx / |b| = {:.3e}",
                cfg.dt,
                0.1 * kg.dx() / sup
            );
        }
    }
    let table = cfg.kernel.as_ref().map(KernelTable::new);
    let mut ens = ParticleEnsemble::initialize(cfg)?;
    let last = record_steps
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(cfg.steps());
    let mut times = Vec::new();
    let mut densities = Vec::new();
    for k in 0..=last {
        for (r, &rs) in record_steps.iter().enumerate() {
            if rs == k {
                times.push(record_times[r]);
                densities.push(empirical_density(&ens, grid)?);
            }
        }
        if k < last {
            step_with(&mut ens, cfg, table.as_ref())?;
        }
    }
    if ens.wrap_flagged() {
        log::warn!(
            "{} periodic wraps, more than 0.1% of particle steps",
            ens.wraps
        );
    }
    Ok(ParticleRun {
        times,
        wraps: ens.wraps,
        wrap_flagged: ens.wrap_flagged(),
        max_drift: ens.max_drift,
        final_ensemble: ens,
        densities,
    })
}

/// Per-time L1 distance between binned particle densities and PDE slices.
pub fn compare_to_pde(
    run: &ParticleRun,
    fp: &DensityTrajectory,
) -> Result<Vec<(f64, f64)>, ParticleError> {
    let mut out = Vec::with_capacity(run.times.len());
    for (&s, f) in run.times.iter().zip(&run.densities) {
        let i = fp.node_index(s).ok_or(ParticleError::MissingTime(s))?;
        let g = fp.slice(i);
        if g.grid() != f.grid() {
            return Err(GridError::GridMismatch.into());
        }
        let vol = f.grid().cell_volume();
        let l1 = f
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * vol;
        out.push((s, l1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{mollify, KernelSpec};

    fn iso(a: f64) -> StableLaw {
        StableLaw::isotropic(a).unwrap()
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn gaussian_increment_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dt = 0.3;
        let sq: Vec<f64> = (0..100_000)
            .map(|_| sample_stable_increment(&iso(2.0), dt, 1, &mut rng)[0].powi(2))
            .collect();
        let (m, se) = mean_and_se(&sq);
        assert!((m - 2.0 * dt).abs() < 3.0 * se, "{m} {se}");
    }

    #[test]
    fn stable_characteristic_function() {
        for mode in [NoiseMode::Isotropic, NoiseMode::CoordinateProduct] {
            let law = StableLaw::new(1.5, mode).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let dt = 0.5;
            let xs: Vec<f64> = (0..100_000)
                .map(|_| sample_stable_increment(&law, dt, 1, &mut rng)[0])
                .collect();
            for xi in [0.5f64, 1.0, 2.0] {
                let c: Vec<f64> = xs.iter().map(|x| (xi * x).cos()).collect();
                let (m, se) = mean_and_se(&c);
                let exact = (-dt * xi.powf(1.5)).exp();
                assert!(
                    (m - exact).abs() < 3.0 * se,
                    "{mode:?} {xi}: {m} vs {exact} ({se})"
                );
            }
            let sg: Vec<f64> = xs.iter().map(|x| x.signum()).collect();
            let (m, se) = mean_and_se(&sg);
            assert!(m.abs() < 3.0 * se);
        }
    }

    #[test]
    fn isotropic_2d_projection_is_one_dimensional_stable() {
        let law = iso(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = [0.6, 0.8];
        let c: Vec<f64> = (0..100_000)
            .map(|_| {
                let z = sample_stable_increment(&law, 1.0, 2, &mut rng);
                (xi[0] * z[0] + xi[1] * z[1]).cos()
            })
            .collect();
        let (m, se) = mean_and_se(&c);
        assert!((m - (-1.0f64).exp()).abs() < 3.0 * se);
    }

    #[test]
    fn single_cell_histogram() {
        let g = Grid::new(1, 64, 4.0).unwrap();
        let ens = ParticleEnsemble::from_positions(vec![0.01, 0.02, -0.01], 1, 0.0, 0).unwrap();
        let f = empirical_density(&ens, &g).unwrap();
        assert!((f.integral() - 1.0).abs() < 1e-14);
        assert!((f.max_abs() - 1.0 / g.dx()).abs() < 1e-12);
        let far = ParticleEnsemble::from_positions(vec![0.0, 9.0], 1, 0.0, 0).unwrap();
        assert!(matches!(
            empirical_density(&far, &g),
            Err(ParticleError::OutsideGrid { .. })
        ));
    }

    #[test]
    fn two_particle_drift_is_bounded_by_the_kernel() {
        let g = Grid::new(1, 256, 5.0).unwrap();
        let k = mollify(&KernelSpec::power(-0.5), &g, 0.1, &iso(2.0)).unwrap();
        let ens = ParticleEnsemble::from_positions(vec![0.13, -0.4], 1, 0.0, 0).unwrap();
        let drift = empirical_drift(&ens, &k, 0.0);
        for v in drift {
            assert!(v.abs() <= k.sup_norm());
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let g = Grid::new(1, 128, 6.0).unwrap();
        let cfg = SimConfig {
            n_particles: 200,
            dt: 0.01,
            t_start: 0.0,
            horizon: 0.1,
            law: iso(1.5),
            d: 1,
            kernel: Some(mollify(&KernelSpec::power(-0.5), &g, 0.2, &iso(1.5)).unwrap()),
            seed: 42,
            initial: InitialLaw::Gaussian {
                mean: vec![0.0],
                var: 0.5,
            },
        };
        let a = simulate(&cfg, &[0.1], &g).unwrap();
        let b = simulate(&cfg, &[0.1], &g).unwrap();
        assert_eq!(a.final_ensemble.positions(), b.final_ensemble.positions());
        assert!(a.max_drift <= cfg.kernel.as_ref().unwrap().sup_norm());
        let mut buf = Vec::new();
        a.final_ensemble.write_positions_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("particle,x1\n"));
        assert_eq!(text.lines().count(), 201);
    }

    #[test]
    fn pairwise_drift_is_permutation_equivariant() {
        let g = Grid::new(1, 128, 6.0).unwrap();
        let k = mollify(&KernelSpec::power(-0.5), &g, 0.2, &iso(2.0)).unwrap();
        let pos = vec![0.3, -1.2, 2.0, 0.7];
        let perm = vec![2.0, 0.3, 0.7, -1.2];
        let a = empirical_drift(
            &ParticleEnsemble::from_positions(pos, 1, 0.0, 0).unwrap(),
            &k,
            0.0,
        );
        let b = empirical_drift(
            &ParticleEnsemble::from_positions(perm, 1, 0.0, 0).unwrap(),
            &k,
            0.0,
        );
        for (i, j) in [(0, 1), (1, 3), (2, 0), (3, 2)] {
            assert!((a[i] - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn off_step_record_time_is_rejected() {
        let g = Grid::new(1, 64, 4.0).unwrap();
        let cfg = SimConfig {
            n_particles: 10,
            dt: 0.1,
            t_start: 0.0,
            horizon: 0.5,
            law: iso(2.0),
            d: 1,
            kernel: None,
            seed: 0,
            initial: InitialLaw::PointMass { center: vec![0.0] },
        };
        assert!(matches!(
            simulate(&cfg, &[0.25], &g),
            Err(ParticleError::OffStep(_))
        ));
    }
}

//! Interaction kernels with a known Besov class, and their mollification by the
//! stable semigroup in space and a bump in time.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{besov_norm, BesovError, BesovIndex, ThermicSettings};
use crate::grid::{Field, Grid, GridError, SpectralField};
use crate::semigroup::{grad_symbol, semigroup_apply, SemigroupError, StableLaw};
use crate::util::{loglog_slope, serde_exponent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{family} kernels are not available in dimension {d}")]
    Unsupported { family: &'static str, d: usize },
    #[error("regularity {0} outside (-1, 0] for a singular family")]
    BadBeta(f64),
    #[error("constant kernel has {got} components on a {d}-dimensional grid")]
    BadComponents { got: usize, d: usize },
    #[error("mollification scale {eps:.3e} is below the resolution floor {floor:.3e}")]
    BelowFloor { eps: f64, floor: f64 },
    #[error("target index {target} must be strictly below the kernel regularity {beta}")]
    TargetTooHigh { target: f64, beta: f64 },
    #[error("time profile exponent {exponent} is not integrable to power r = {r}")]
    BadProfile { exponent: f64, r: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Besov(#[from] BesovError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelFamily {
    /// `sgn(x) |x|^beta` in one dimension.
    Power,
    /// Gradient of a random field with prescribed spectral decay.
    GradHolder {
        seed: u64,
    },
    /// `amplitude * x * exp(-|x|^2 / (2 width^2))`.
    SmoothBump {
        amplitude: f64,
        width: f64,
    },
    ConstantVector {
        value: Vec<f64>,
    },
    Zero,
}

impl KernelFamily {
    fn name(&self) -> &'static str {
        match self {
            KernelFamily::Power => "power",
            KernelFamily::GradHolder { .. } => "grad-holder",
            KernelFamily::SmoothBump { .. } => "smooth-bump",
            KernelFamily::ConstantVector { .. } => "constant-vector",
            KernelFamily::Zero => "zero",
        }
    }

    fn is_singular(&self) -> bool {
        matches!(self, KernelFamily::Power | KernelFamily::GradHolder { .. })
    }
}

/// Time modulation `b(s, x) = g(s) b_0(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeProfile {
    #[default]
    Constant,
    /// `g(s) = (s - start)^{-exponent}` for `s > start`, zero before.
    Power { start: f64, exponent: f64 },
}

impl TimeProfile {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Power { start, exponent } => {
                if s > start {
                    (s - start).powf(-exponent)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Integrability class `(beta, p, q, r)` the kernel is claimed to belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimedClass {
    pub beta: f64,
    #[serde(with = "serde_exponent")]
    pub p: f64,
    #[serde(with = "serde_exponent")]
    pub q: f64,
    #[serde(with = "serde_exponent")]
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub beta: f64,
    #[serde(default)]
    pub time_profile: TimeProfile,
    pub claimed_class: ClaimedClass,
}

impl KernelSpec {
    /// `sgn(x)|x|^beta` in `B^beta_{inf,inf}`, constant in time.
    pub fn power(beta: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Power,
            beta,
            time_profile: TimeProfile::Constant,
            claimed_class: ClaimedClass {
                beta,
                p: f64::INFINITY,
                q: f64::INFINITY,
                r: f64::INFINITY,
            },
        }
    }

    pub fn zero() -> Self {
        KernelSpec {
            family: KernelFamily::Zero,
            beta: 0.0,
            time_profile: TimeProfile::Constant,
            claimed_class: ClaimedClass {
                beta: 0.0,
                p: f64::INFINITY,
                q: f64::INFINITY,
                r: f64::INFINITY,
            },
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        KernelSpec {
            family: KernelFamily::ConstantVector { value },
            ..Self::zero()
        }
    }

    pub fn smooth_bump(amplitude: f64, width: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SmoothBump { amplitude, width },
            ..Self::zero()
        }
    }

    pub fn grad_holder(beta: f64, seed: u64) -> Self {
        KernelSpec {
            family: KernelFamily::GradHolder { seed },
            ..Self::power(beta)
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.family.is_singular() && !(self.beta > -1.0 && self.beta <= 0.0) {
            return Err(KernelError::BadBeta(self.beta));
        }
        if let TimeProfile::Power { exponent, .. } = self.time_profile {
            let r = self.claimed_class.r;
            if exponent < 0.0
                || (r.is_finite() && exponent * r >= 1.0)
                || (r.is_infinite() && exponent > 0.0)
            {
                return Err(KernelError::BadProfile { exponent, r });
            }
        }
        Ok(())
    }

    /// Whether the kernel vanishes identically.
    pub fn is_zero(&self) -> bool {
        match &self.family {
            KernelFamily::Zero => true,
            KernelFamily::ConstantVector { value } => value.iter().all(|&c| c == 0.0),
            KernelFamily::SmoothBump { amplitude, .. } => *amplitude == 0.0,
            _ => false,
        }
    }
}

/// Grid realization `b(s, x) = g(s) b_0(x)`, one field per vector component.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedKernel {
    pub spatial: Vec<Field>,
    pub profile: TimeProfile,
}

impl RealizedKernel {
    pub fn slice(&self, s: f64) -> Vec<Field> {
        let g = self.profile.value(s);
        self.spatial.iter().map(|f| f.scale(g)).collect()
    }
}

pub fn realize_kernel(spec: &KernelSpec, grid: &Grid) -> Result<RealizedKernel, KernelError> {
    spec.validate()?;
    let d = grid.dim();
    let spatial = match &spec.family {
        KernelFamily::Zero => vec![Field::zeros(grid); d],
        KernelFamily::ConstantVector { value } => {
            if value.len() != d {
                return Err(KernelError::BadComponents {
                    got: value.len(),
                    d,
                });
            }
            value.iter().map(|&c| Field::constant(grid, c)).collect()
        }
        KernelFamily::SmoothBump { amplitude, width } => (0..d)
            .map(|a| {
                Field::from_fn(grid, |x| {
                    let r2: f64 = x.iter().map(|y| y * y).sum();
                    amplitude * x[a] * (-r2 / (2.0 * width * width)).exp()
                })
            })
            .collect(),
        KernelFamily::Power => {
            if d != 1 {
                return Err(KernelError::Unsupported {
                    family: spec.family.name(),
                    d,
                });
            }
            // the node at the origin takes the cell average, which vanishes by oddness
            let beta = spec.beta;
            vec![Field::from_fn(grid, |x| {
                if x[0] == 0.0 {
                    0.0
                } else {
                    x[0].signum() * x[0].abs().powf(beta)
                }
            })]
        }
        KernelFamily::GradHolder { seed } => {
            let decay = spec.beta + 1.0 + d as f64 / 2.0 + 0.01;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let coeffs: Vec<Complex64> = (0..grid.len())
                .map(|i| {
                    let w = grid.wave(i);
                    let r = w[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                    if r == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::from_polar(r.powf(-decay), phase)
                    }
                })
                .collect();
            let potential = SpectralField::from_coeffs(grid, coeffs)?.to_physical();
            let scale = potential.max_abs();
            let potential = potential.scale(1.0 / scale).to_spectral();
            (0..d)
                .map(|a| {
                    potential
                        .multiply(|i| grad_symbol(grid, i, a))
                        .to_physical()
                })
                .collect()
        }
    };
    Ok(RealizedKernel {
        spatial,
        profile: spec.time_profile,
    })
}

/// Normalized bump `exp(1 - 1/(1 - u^2))` on `(-1, 1)` without normalization.
fn raw_bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - u * u)).exp()
    }
}

const BUMP_NODES: usize = 2000;

fn bump_mass() -> f64 {
    let h = 2.0 / BUMP_NODES as f64;
    (0..BUMP_NODES)
        .map(|k| raw_bump(-1.0 + (k as f64 + 0.5) * h) * h)
        .sum()
}

/// Smoothed kernel `b^eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedKernel {
    pub base: KernelSpec,
    pub epsilon: f64,
    pub spatial: Vec<Field>,
    pub profile: TimeProfile,
}

impl MollifiedKernel {
    /// Time factor `(eta_eps * g)(s)`; exact for constant profiles.
    pub fn time_factor(&self, s: f64) -> f64 {
        match self.profile {
            TimeProfile::Constant => 1.0,
            p @ TimeProfile::Power { .. } => {
                let eps = self.epsilon;
                let h = 2.0 / BUMP_NODES as f64;
                let mass = bump_mass();
                (0..BUMP_NODES)
                    .map(|k| {
                        let u = -1.0 + (k as f64 + 0.5) * h;
                        raw_bump(u) * p.value(s - eps * u) * h
                    })
                    .sum::<f64>()
                    / mass
            }
        }
    }

    pub fn slice(&self, s: f64) -> Vec<Field> {
        let g = self.time_factor(s);
        self.spatial.iter().map(|f| f.scale(g)).collect()
    }

    /// Largest component sup-norm of the spatial part.
    pub fn sup_norm(&self) -> f64 {
        self.spatial.iter().map(|f| f.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_time_dependent(&self) -> bool {
        !matches!(self.profile, TimeProfile::Constant)
    }
}

pub fn mollify(
    spec: &KernelSpec,
    grid: &Grid,
    eps: f64,
    law: &StableLaw,
) -> Result<MollifiedKernel, KernelError> {
    law.validate()?;
    let floor = grid.resolution_floor(law.alpha);
    if !(eps >= floor * (1.0 - 1e-12)) {
        return Err(KernelError::BelowFloor { eps, floor });
    }
    let raw = realize_kernel(spec, grid)?;
    let spatial = match spec.family {
        // the mollifier has unit mass, so constants are fixed points
        KernelFamily::Zero | KernelFamily::ConstantVector { .. } => raw.spatial,
        _ => raw
            .spatial
            .iter()
            .map(|f| semigroup_apply(f, eps, law))
            .collect::<Result<_, _>>()?,
    };
    Ok(MollifiedKernel {
        base: spec.clone(),
        epsilon: eps,
        spatial,
        profile: raw.profile,
    })
}

/// Sup-norm of each component's gradient, summed over axes.
pub fn gradient_sup_norm(k: &MollifiedKernel) -> f64 {
    let mut worst: f64 = 0.0;
    for f in &k.spatial {
        let grid = *f.grid();
        let spec = f.to_spectral();
        for a in 0..grid.dim() {
            let g = spec.multiply(|i| grad_symbol(&grid, i, a)).to_physical();
            worst = worst.max(g.max_abs());
        }
    }
    worst
}

/// Besov distance between two vector kernels: the largest component distance.
pub fn kernel_distance(
    a: &[Field],
    b: &[Field],
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<f64, KernelError> {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(besov_norm(&x.sub(y)?, idx, law, ts)?);
    }
    Ok(worst)
}

/// Distances `|b - b^eps|` for a list of scales, with trend diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<(f64, f64)>,
    /// `None` for a single row.
    pub monotone: Option<bool>,
    pub last_over_first: Option<f64>,
    /// Log-log slope of distance against `eps`.
    pub rate: Option<f64>,
}

impl ConvergenceTable {
    fn from_rows(rows: Vec<(f64, f64)>) -> Self {
        if rows.len() < 2 {
            return ConvergenceTable {
                rows,
                monotone: None,
                last_over_first: None,
                rate: None,
            };
        }
        let monotone = rows.windows(2).all(|w| w[1].1 <= 1.05 * w[0].1);
        let last_over_first = rows[rows.len() - 1].1 / rows[0].1;
        let eps: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let dist: Vec<f64> = rows.iter().map(|r| r.1).collect();
        ConvergenceTable {
            monotone: Some(monotone),
            last_over_first: Some(last_over_first),
            rate: Some(loglog_slope(&eps, &dist)),
            rows,
        }
    }

    /// Monotone within 5% and shrinking by more than a factor 0.3.
    pub fn trend_ok(&self) -> Option<bool> {
        Some(self.monotone? && self.last_over_first? < 0.3)
    }
}

/// Distance in `B^{target}_{p,q}` (claimed `p`, `q`) between `b` and `b^eps`.
pub fn mollifier_convergence(
    spec: &KernelSpec,
    grid: &Grid,
    target: f64,
    eps_list: &[f64],
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<ConvergenceTable, KernelError> {
    if target >= spec.beta {
        return Err(KernelError::TargetTooHigh {
            target,
            beta: spec.beta,
        });
    }
    let raw = realize_kernel(spec, grid)?;
    let idx = BesovIndex::new(target, spec.claimed_class.p, spec.claimed_class.q)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let m = mollify(spec, grid, eps, law)?;
        rows.push((
            eps,
            kernel_distance(&raw.spatial, &m.spatial, &idx, law, ts)?,
        ));
    }
    Ok(ConvergenceTable::from_rows(rows))
}

//! Besov norms through the thermic characterization, weighted time norms, and
//! measured-ratio checks of the functional inequalities they satisfy.
//!
//! `|f|_{B^gamma_{ell,m}} = |F^{-1}(phi F f)|_{L^ell}
//!     + ( \int_0^1 dv/v [v^{n - gamma/alpha} |d_v^n p_v * f|_{L^ell}]^m )^{1/m}`
//!
//! The `v`-integral is truncated at the resolution floor and discretized by the
//! trapezoid rule in `log v`.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{convolve, lp_norm, lp_norm_unchecked, Field, GridError, SpectralField};
use crate::semigroup::{SemigroupError, StableLaw};
use crate::trajectory::DensityTrajectory;
use crate::util::{conjugate, logspace, serde_exponent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BesovError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error("invalid Besov index: {0}")]
    BadIndex(String),
    #[error("thermic order {n} must exceed gamma/alpha = {ratio}")]
    OrderTooSmall { n: u32, ratio: f64 },
    #[error("grid too coarse: lower quadrature limit {v_min:.3e} is not below 1")]
    TooCoarse { v_min: f64 },
    #[error("need at least two quadrature nodes, got {0}")]
    TooFewNodes(usize),
    #[error("exponent bookkeeping violated: {0}")]
    Bookkeeping(String),
    #[error("both fields vanish; the ratio is undefined")]
    ZeroDenominator,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("right endpoint {s} outside the trajectory range ({t0}, {t1}]")]
    EndpointOutOfRange { s: f64, t0: f64, t1: f64 },
    #[error("time exponent must be >= 1, got {0}")]
    BadTimeExponent(f64),
}

/// Index `(gamma, ell, m)` of the space `B^gamma_{ell,m}`; `ell` and `m` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesovIndex {
    pub gamma: f64,
    #[serde(with = "serde_exponent")]
    pub ell: f64,
    #[serde(with = "serde_exponent")]
    pub m: f64,
}

impl BesovIndex {
    pub fn new(gamma: f64, ell: f64, m: f64) -> Result<Self, BesovError> {
        let idx = BesovIndex { gamma, ell, m };
        idx.validate()?;
        Ok(idx)
    }

    pub fn validate(&self) -> Result<(), BesovError> {
        if !self.gamma.is_finite() {
            return Err(BesovError::BadIndex(format!("gamma = {}", self.gamma)));
        }
        if self.ell.is_nan() || self.ell < 1.0 {
            return Err(BesovError::BadIndex(format!("ell = {}", self.ell)));
        }
        if self.m.is_nan() || self.m < 1.0 {
            return Err(BesovError::BadIndex(format!("m = {}", self.m)));
        }
        Ok(())
    }

    /// The dual index `(-gamma, ell', m')`.
    pub fn dual(&self) -> BesovIndex {
        BesovIndex {
            gamma: -self.gamma,
            ell: conjugate(self.ell),
            m: conjugate(self.m),
        }
    }

    pub fn label(&self) -> String {
        format!(
            "B^{}_{{{},{}}}",
            self.gamma,
            fmt_exp(self.ell),
            fmt_exp(self.m)
        )
    }
}

fn fmt_exp(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

/// Quadrature settings for the thermic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermicSettings {
    /// Time-derivative order; `None` picks the smallest admissible one.
    pub order: Option<u32>,
    pub v_nodes: usize,
    /// Lower quadrature limit; `None` uses the resolution floor `(2 dx)^alpha`.
    pub v_min: Option<f64>,
    /// Radius of the low-frequency window.
    pub window_radius: f64,
}

impl Default for ThermicSettings {
    fn default() -> Self {
        ThermicSettings {
            order: None,
            v_nodes: 200,
            v_min: None,
            window_radius: 1.0,
        }
    }
}

impl ThermicSettings {
    pub fn with_nodes(v_nodes: usize) -> Self {
        ThermicSettings {
            v_nodes,
            ..Default::default()
        }
    }

    /// Order actually used for `gamma`: `0` if `gamma < 0`, else `floor(gamma/alpha) + 1`.
    pub fn resolve_order(&self, gamma: f64, alpha: f64) -> Result<u32, BesovError> {
        let ratio = gamma / alpha;
        let n = match self.order {
            Some(n) => n,
            None if gamma < 0.0 => 0,
            None => ratio.floor() as u32 + 1,
        };
        if (n as f64) <= ratio {
            return Err(BesovError::OrderTooSmall { n, ratio });
        }
        Ok(n)
    }
}

/// Smooth compactly supported window `exp(1 - 1/(1 - |xi/r|^2))`, equal to 1 at 0.
pub fn low_frequency_window(xi: &[f64], radius: f64) -> f64 {
    let u2: f64 = xi.iter().map(|x| (x / radius).powi(2)).sum();
    if u2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - u2)).exp()
    }
}

/// The two pieces of the thermic norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesovParts {
    pub low: f64,
    pub thermic: f64,
}

impl BesovParts {
    pub fn total(&self) -> f64 {
        self.low + self.thermic
    }
}

struct Prepared {
    spec: SpectralField,
    psi: Vec<f64>,
}

fn prepare(f: &Field, law: &StableLaw) -> Result<Prepared, BesovError> {
    law.validate()?;
    Ok(Prepared {
        spec: f.to_spectral(),
        psi: law.symbol_table(f.grid()),
    })
}

fn thermic_from(
    p: &Prepared,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<f64, BesovError> {
    idx.validate()?;
    let grid = *p.spec.grid();
    let n = ts.resolve_order(idx.gamma, law.alpha)?;
    let v_min = ts.v_min.unwrap_or_else(|| grid.resolution_floor(law.alpha));
    if !(v_min < 1.0) || v_min <= 0.0 {
        return Err(BesovError::TooCoarse { v_min });
    }
    if ts.v_nodes < 2 {
        return Err(BesovError::TooFewNodes(ts.v_nodes));
    }
    let vs = logspace(v_min, 1.0, ts.v_nodes);
    let du = -v_min.ln() / (ts.v_nodes - 1) as f64;
    let power = n as f64 - idx.gamma / law.alpha;
    let vol = grid.cell_volume();
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    for (k, &v) in vs.iter().enumerate() {
        let smoothed = p.spec.multiply(|i| {
            let s = p.psi[i];
            Complex64::new(sign * s.powi(n as i32) * (-v * s).exp(), 0.0)
        });
        let phys = smoothed.to_physical();
        let w = v.powf(power) * lp_norm_unchecked(phys.values(), idx.ell, vol);
        if idx.m.is_infinite() {
            worst = worst.max(w);
        } else {
            let trap = if k == 0 || k + 1 == vs.len() {
                0.5
            } else {
                1.0
            };
            acc += trap * du * w.powf(idx.m);
        }
    }
    Ok(if idx.m.is_infinite() {
        worst
    } else {
        acc.powf(1.0 / idx.m)
    })
}

fn low_from(p: &Prepared, idx: &BesovIndex, ts: &ThermicSettings) -> f64 {
    let grid = *p.spec.grid();
    let d = grid.dim();
    let windowed = p.spec.multiply(|i| {
        Complex64::new(
            low_frequency_window(&grid.wave(i)[..d], ts.window_radius),
            0.0,
        )
    });
    lp_norm_unchecked(windowed.to_physical().values(), idx.ell, grid.cell_volume())
}

/// The `v`-integral part of the norm.
pub fn thermic_part(
    f: &Field,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<f64, BesovError> {
    thermic_from(&prepare(f, law)?, idx, law, ts)
}

/// Low-frequency and thermic parts separately.
pub fn besov_parts(
    f: &Field,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<BesovParts, BesovError> {
    let p = prepare(f, law)?;
    let thermic = thermic_from(&p, idx, law, ts)?;
    Ok(BesovParts {
        low: low_from(&p, idx, ts),
        thermic,
    })
}

pub fn besov_norm(
    f: &Field,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<f64, BesovError> {
    Ok(besov_parts(f, idx, law, ts)?.total())
}

/// Weighted time norm `(sum_s ds (S - s)^{-r/alpha} |traj(s)|^r)^{1/r}` over nodes
/// strictly before `S` (left-rectangle rule).
pub fn weighted_bochner_norm(
    traj: &DensityTrajectory,
    r: f64,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
    s_end: f64,
) -> Result<f64, BesovError> {
    if traj.is_empty() {
        return Err(BesovError::EmptyTrajectory);
    }
    if r.is_nan() || r < 1.0 {
        return Err(BesovError::BadTimeExponent(r));
    }
    let times = traj.times();
    let (t0, t1) = (times[0], times[times.len() - 1]);
    if !(s_end > t0 && s_end <= t1 * (1.0 + 1e-12) + 1e-15) {
        return Err(BesovError::EndpointOutOfRange { s: s_end, t0, t1 });
    }
    let mut acc = 0.0;
    for i in 0..times.len() - 1 {
        let s = times[i];
        if s >= s_end {
            break;
        }
        let ds = times[i + 1].min(s_end) - s;
        let norm = besov_norm(traj.slice(i), idx, law, ts)?;
        if norm == 0.0 {
            continue;
        }
        acc += ds * (s_end - s).powf(-r / law.alpha) * norm.powf(r);
    }
    Ok(acc.powf(1.0 / r))
}

/// Outcome of a measured-ratio check. For a single input `fitted_constant ==
/// ratio`; for a family it is the largest member ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub ratio: f64,
    pub fitted_constant: f64,
    pub family_size: usize,
    pub witnesses: Vec<String>,
    pub lhs: f64,
    pub rhs: f64,
    /// Signed value of the pairing `\int f g` for duality checks.
    pub pairing: Option<f64>,
}

impl InequalityReport {
    fn single(lhs: f64, rhs: f64) -> Self {
        let ratio = if rhs == 0.0 { 0.0 } else { lhs / rhs };
        InequalityReport {
            ratio,
            fitted_constant: ratio,
            family_size: 1,
            witnesses: Vec::new(),
            lhs,
            rhs,
            pairing: None,
        }
    }

    pub fn with_witness(mut self, w: impl Into<String>) -> Self {
        self.witnesses = vec![w.into()];
        self
    }

    /// Folds member reports into one whose constant is the largest ratio.
    pub fn fit_family(members: &[InequalityReport]) -> Option<InequalityReport> {
        let worst = members.iter().max_by(|a, b| a.ratio.total_cmp(&b.ratio))?;
        Some(InequalityReport {
            ratio: worst.ratio,
            fitted_constant: worst.ratio,
            family_size: members.len(),
            witnesses: worst.witnesses.clone(),
            lhs: worst.lhs,
            rhs: worst.rhs,
            pairing: worst.pairing,
        })
    }
}

/// Writes `family_id,ratio,parameters` rows, one per member.
pub fn write_reports_csv<W: Write>(
    w: W,
    family_id: &str,
    members: &[InequalityReport],
) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["family_id", "ratio", "parameters"])?;
    for m in members {
        wr.write_record([
            family_id.to_string(),
            format!("{:?}", m.ratio),
            m.witnesses.join(";"),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Splitting `(delta, ell1, ell2, m1, m2)` for the convolution inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoungSplit {
    pub delta: f64,
    pub ell1: f64,
    pub ell2: f64,
    pub m1: f64,
    pub m2: f64,
}

fn recip(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        1.0 / x
    }
}

const BOOK_TOL: f64 = 1e-12;

/// `|f * g|_{B^gamma_{ell,m}} / (|f|_{B^{gamma-delta}_{ell1,m1}} |g|_{B^delta_{ell2,m2}})`.
pub fn check_young(
    f: &Field,
    g: &Field,
    target: &BesovIndex,
    split: &YoungSplit,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<InequalityReport, BesovError> {
    let lhs_int = 1.0 + recip(target.ell);
    let rhs_int = recip(split.ell1) + recip(split.ell2);
    if (lhs_int - rhs_int).abs() > BOOK_TOL {
        return Err(BesovError::Bookkeeping(format!(
            "1 + 1/ell = {lhs_int} but 1/ell1 + 1/ell2 = {rhs_int}"
        )));
    }
    let need = (recip(target.m) - recip(split.m2)).max(0.0);
    if recip(split.m1) < need - BOOK_TOL {
        return Err(BesovError::Bookkeeping(format!(
            "1/m1 = {} is below (1/m - 1/m2) v 0 = {need}",
            recip(split.m1)
        )));
    }
    let fi = BesovIndex::new(target.gamma - split.delta, split.ell1, split.m1)?;
    let gi = BesovIndex::new(split.delta, split.ell2, split.m2)?;
    let lhs = besov_norm(&convolve(f, g)?, target, law, ts)?;
    let rhs = besov_norm(f, &fi, law, ts)? * besov_norm(g, &gi, law, ts)?;
    Ok(InequalityReport::single(lhs, rhs))
}

/// `|\int f g| / (|f|_{B^gamma_{ell,m}} |g|_{B^{-gamma}_{ell',m'}})`.
pub fn check_duality(
    f: &Field,
    g: &Field,
    idx: &BesovIndex,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<InequalityReport, BesovError> {
    let fg = f.mul(g)?;
    let pairing = fg.integral();
    let nf = besov_norm(f, idx, law, ts)?;
    let ng = besov_norm(g, &idx.dual(), law, ts)?;
    if nf == 0.0 && ng == 0.0 {
        return Err(BesovError::ZeroDenominator);
    }
    let mut rep = InequalityReport::single(pairing.abs(), nf * ng);
    rep.pairing = Some(pairing);
    Ok(rep)
}

/// Indices for the four-factor convolution bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FghIndices {
    pub f: BesovIndex,
    /// Regularity of `g1` is `-f.gamma`; only integrability and summability are free.
    pub g1_ell: f64,
    pub g1_m: f64,
    pub g2_ell: f64,
    pub h: BesovIndex,
    /// Output space; its regularity must equal `h.gamma`.
    pub target: BesovIndex,
}

/// `|((f * g1) g2) * h|_{target} / (|f| |g1| |g2|_{L^ell_g2} |h|)`.
pub fn check_fgh(
    f: &Field,
    g1: &Field,
    g2: &Field,
    h: &Field,
    idx: &FghIndices,
    law: &StableLaw,
    ts: &ThermicSettings,
) -> Result<InequalityReport, BesovError> {
    let sum = recip(idx.f.ell) + recip(idx.g1_ell) + recip(idx.g2_ell) + recip(idx.h.ell);
    let want = 2.0 + recip(idx.target.ell);
    if (sum - want).abs() > BOOK_TOL {
        return Err(BesovError::Bookkeeping(format!(
            "1/ell_f + 1/ell_g1 + 1/ell_g2 + 1/ell_h = {sum} but 2 + 1/ell = {want}"
        )));
    }
    if idx.h.m > idx.target.m {
        return Err(BesovError::Bookkeeping(format!(
            "m_h = {} exceeds m = {}",
            idx.h.m, idx.target.m
        )));
    }
    let need = (1.0 - recip(idx.f.m)).max(0.0);
    if recip(idx.g1_m) < need - BOOK_TOL {
        return Err(BesovError::Bookkeeping(format!(
            "1/m_g1 = {} is below (1 - 1/m_f) v 0 = {need}",
            recip(idx.g1_m)
        )));
    }
    if (idx.h.gamma - idx.target.gamma).abs() > BOOK_TOL {
        return Err(BesovError::Bookkeeping(format!(
            "h regularity {} differs from target regularity {}",
            idx.h.gamma, idx.target.gamma
        )));
    }
    let g1i = BesovIndex::new(-idx.f.gamma, idx.g1_ell, idx.g1_m)?;
    let factors = [
        besov_norm(f, &idx.f, law, ts)?,
        besov_norm(g1, &g1i, law, ts)?,
        lp_norm(g2, idx.g2_ell)?,
        besov_norm(h, &idx.h, law, ts)?,
    ];
    if factors.contains(&0.0) {
        return Ok(InequalityReport::single(0.0, 0.0));
    }
    let c = convolve(f, g1)?;
    let lhs = besov_norm(&convolve(&c.mul(g2)?, h)?, &idx.target, law, ts)?;
    Ok(InequalityReport::single(lhs, factors.iter().product()))
}

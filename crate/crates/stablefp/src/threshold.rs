//! Exact rational arithmetic for the admissibility conditions on
//! `(alpha, beta, p, q, r, d)`.
//!
//! Infinite exponents are a distinct value, so `1/inf = 0` holds exactly.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::serde_exponent;

pub type Q = BigRational;

/// `num / den` as an exact rational.
pub fn q(num: i64, den: i64) -> Q {
    Q::new(BigInt::from(num), BigInt::from(den))
}

/// Integer as an exact rational.
pub fn qi(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

/// Largest denominator used when reading decimal inputs.
pub const MAX_DENOMINATOR: i128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("alpha = {0} outside (1, 2]")]
    BadAlpha(String),
    #[error("beta = {0} outside [-1, 0]")]
    BadBeta(String),
    #[error("exponent {name} = {value} outside [1, inf]")]
    BadExponent { name: &'static str, value: String },
    #[error("dimension must be at least 1")]
    BadDimension,
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("rbar = {rbar} outside the admissible interval [{lower}, {upper})")]
    RbarOutOfRange {
        rbar: String,
        lower: String,
        upper: String,
    },
    #[error("theta = {0} outside [0, 1)")]
    BadTheta(String),
}

/// Best rational approximation with denominator at most `max_den`
/// (continued-fraction convergents and semiconvergents).
pub fn rational_from_f64(x: f64, max_den: i128) -> Result<Q, ThresholdError> {
    if !x.is_finite() {
        return Err(ThresholdError::NonFinite(x));
    }
    let neg = x < 0.0;
    let mut y = x.abs();
    let (mut p0, mut q0, mut p1, mut q1): (i128, i128, i128, i128) = (0, 1, 1, 0);
    let target = x.abs();
    loop {
        let a = y.floor();
        let ai = a as i128;
        let q2 = q0 + ai * q1;
        if q2 > max_den {
            // best semiconvergent
            let k = (max_den - q0) / q1;
            let (pa, qa) = (p0 + k * p1, q0 + k * q1);
            let ea = (pa as f64 / qa as f64 - target).abs();
            let eb = (p1 as f64 / q1 as f64 - target).abs();
            let (p, q) = if ea < eb { (pa, qa) } else { (p1, q1) };
            return Ok(signed(Q::new(BigInt::from(p), BigInt::from(q)), neg));
        }
        let p2 = p0 + ai * p1;
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
        let frac = y - a;
        if frac.abs() < 1e-15 || (p1 as f64 / q1 as f64 - target).abs() <= 1e-15 * target.max(1.0) {
            return Ok(signed(Q::new(BigInt::from(p1), BigInt::from(q1)), neg));
        }
        y = 1.0 / frac;
    }
}

fn signed(q: Q, neg: bool) -> Q {
    if neg {
        -q
    } else {
        q
    }
}

pub fn q_to_f64(q: &Q) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// Exponent in `[1, inf]` with a symbolic infinity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Exponent {
    Finite(Q),
    Infinite,
}

impl Exponent {
    pub fn from_f64(x: f64) -> Result<Self, ThresholdError> {
        if x.is_infinite() && x > 0.0 {
            Ok(Exponent::Infinite)
        } else {
            Ok(Exponent::Finite(rational_from_f64(x, MAX_DENOMINATOR)?))
        }
    }

    /// `1/x`, zero for infinity.
    pub fn recip(&self) -> Q {
        match self {
            Exponent::Finite(x) => x.recip(),
            Exponent::Infinite => Q::zero(),
        }
    }

    /// Exponent whose reciprocal is `q`; `q = 0` gives infinity.
    pub fn from_recip(q: Q) -> Self {
        if q.is_zero() {
            Exponent::Infinite
        } else {
            Exponent::Finite(q.recip())
        }
    }

    /// Hölder conjugate: `1/x + 1/x' = 1`.
    pub fn conjugate(&self) -> Self {
        Exponent::from_recip(Q::one() - self.recip())
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Exponent::Finite(x) => q_to_f64(x),
            Exponent::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Exponent::Infinite)
    }
}

impl PartialOrd for Exponent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Exponent {
    fn cmp(&self, other: &Self) -> Ordering {
        // exponents are positive, so ordering reverses on reciprocals
        other.recip().cmp(&self.recip())
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(x) => write!(f, "{x}"),
            Exponent::Infinite => write!(f, "inf"),
        }
    }
}

/// Decimal form of a parameter tuple, as read from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterInput {
    pub alpha: f64,
    pub beta: f64,
    #[serde(with = "serde_exponent")]
    pub p: f64,
    #[serde(with = "serde_exponent")]
    pub q: f64,
    #[serde(with = "serde_exponent")]
    pub r: f64,
    pub d: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSet {
    pub alpha: Q,
    pub beta: Q,
    pub p: Exponent,
    pub q: Exponent,
    pub r: Exponent,
    pub d: u32,
}

impl ParameterSet {
    pub fn new(
        alpha: Q,
        beta: Q,
        p: Exponent,
        q: Exponent,
        r: Exponent,
        d: u32,
    ) -> Result<Self, ThresholdError> {
        let one = Q::one();
        if !(alpha > one && alpha <= qi(2)) {
            return Err(ThresholdError::BadAlpha(alpha.to_string()));
        }
        // beta = -1 is admitted so that the critical boundary can be evaluated
        if !(beta >= -one.clone() && beta <= Q::zero()) {
            return Err(ThresholdError::BadBeta(beta.to_string()));
        }
        for (name, e) in [("p", &p), ("q", &q), ("r", &r)] {
            if let Exponent::Finite(x) = e {
                if *x < one {
                    return Err(ThresholdError::BadExponent {
                        name,
                        value: x.to_string(),
                    });
                }
            }
        }
        if d == 0 {
            return Err(ThresholdError::BadDimension);
        }
        Ok(ParameterSet {
            alpha,
            beta,
            p,
            q,
            r,
            d,
        })
    }

    pub fn from_f64(
        alpha: f64,
        beta: f64,
        p: f64,
        q: f64,
        r: f64,
        d: u32,
    ) -> Result<Self, ThresholdError> {
        Self::new(
            rational_from_f64(alpha, MAX_DENOMINATOR)?,
            rational_from_f64(beta, MAX_DENOMINATOR)?,
            Exponent::from_f64(p)?,
            Exponent::from_f64(q)?,
            Exponent::from_f64(r)?,
            d,
        )
    }

    pub fn from_input(i: &ParameterInput) -> Result<Self, ThresholdError> {
        Self::from_f64(i.alpha, i.beta, i.p, i.q, i.r, i.d)
    }

    pub fn to_input(&self) -> ParameterInput {
        ParameterInput {
            alpha: q_to_f64(&self.alpha),
            beta: q_to_f64(&self.beta),
            p: self.p.to_f64(),
            q: self.q.to_f64(),
            r: self.r.to_f64(),
            d: self.d,
        }
    }

    fn dq(&self) -> Q {
        qi(self.d as i64)
    }

    /// `d/p + alpha/r`, the integrability penalty shared by all thresholds.
    fn penalty(&self) -> Q {
        self.dq() * self.p.recip() + &self.alpha * self.r.recip()
    }

    /// Weak threshold `1 - alpha + d/p + alpha/r`.
    pub fn weak_threshold(&self) -> Q {
        Q::one() - &self.alpha + self.penalty()
    }

    /// Strong threshold `2 - 3 alpha / 2 + d/p + alpha/r`.
    pub fn strong_threshold(&self) -> Q {
        qi(2) - q(3, 2) * &self.alpha + self.penalty()
    }

    /// Linear threshold `(1 - alpha)/2`.
    pub fn linear_threshold(&self) -> Q {
        (Q::one() - &self.alpha) / qi(2)
    }
}

impl fmt::Display for ParameterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha={} beta={} p={} q={} r={} d={}",
            self.alpha, self.beta, self.p, self.q, self.r, self.d
        )
    }
}

/// Gap `beta - (1 - alpha + d/p + alpha/r)`.
pub fn gap(ps: &ParameterSet) -> Q {
    &ps.beta - ps.weak_threshold()
}

/// Half-open interval `[lower, upper)` of admissible time exponents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RbarInterval {
    pub lower: Exponent,
    pub upper: Exponent,
}

impl RbarInterval {
    pub fn contains(&self, x: &Exponent) -> bool {
        *x >= self.lower && *x < self.upper
    }
}

/// Witness `(gamma, ell, s)` for the strong-uniqueness drift criterion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrongWitness {
    pub theta_bar: Q,
    pub gamma: Q,
    pub ell: u64,
    pub s: Exponent,
    /// `alpha/s + d/ell`, to be compared with `alpha - 1`.
    pub lhs: Q,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriftIntegrability {
    pub rbar: Exponent,
    /// Largest admissible `r0`, i.e. `(1/r + 1/rbar)^{-1}`.
    pub r0_max: Exponent,
    pub kr_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdReport {
    pub params: ParameterSet,
    pub gamma_gap: Q,
    pub weak_ok: bool,
    pub strong_ok: bool,
    pub linear_ok: bool,
    /// `None` when empty.
    pub rbar_interval: Option<RbarInterval>,
    /// Drift integrability at the representative `rbar` (near the upper end).
    pub r0_interval: Option<DriftIntegrability>,
    pub kr_ok: bool,
    pub xz_certificate: Option<StrongWitness>,
}

/// `[r', (-beta/alpha + d/(alpha p))^{-1})`, or `None` if empty.
pub fn rbar_interval(ps: &ParameterSet) -> Option<RbarInterval> {
    let lower = ps.r.conjugate();
    let upper_recip = (-&ps.beta + ps.dq() * ps.p.recip()) / &ps.alpha;
    let upper = Exponent::from_recip(upper_recip);
    if lower < upper {
        Some(RbarInterval { lower, upper })
    } else {
        None
    }
}

/// Time exponents for which `s -> |rho(s)|` in `B^{-beta + theta Gap}_{p',q'}` is
/// `rbar`-integrable: `[r', ((-beta + theta Gap + d/p)/alpha)^{-1})`.
pub fn rbar_interval_at(
    ps: &ParameterSet,
    theta: Q,
) -> Result<Option<RbarInterval>, ThresholdError> {
    if theta < Q::zero() || theta >= Q::one() {
        return Err(ThresholdError::BadTheta(theta.to_string()));
    }
    let lower = ps.r.conjugate();
    let recip = (-&ps.beta + theta * gap(ps) + ps.dq() * ps.p.recip()) / &ps.alpha;
    let upper = Exponent::from_recip(recip.max(Q::zero()));
    Ok((lower < upper).then_some(RbarInterval { lower, upper }))
}

/// Representative `rbar` with `alpha/rbar = -beta + d/p + Gap/2`.
fn representative_rbar(ps: &ParameterSet) -> Option<Exponent> {
    let g = gap(ps);
    if g <= Q::zero() {
        return None;
    }
    let recip = (-&ps.beta + ps.dq() * ps.p.recip() + g / qi(2)) / &ps.alpha;
    Some(Exponent::from_recip(recip))
}

/// Integrability window for the mollified nonlinear drift at a given `rbar`.
pub fn drift_integrability(
    ps: &ParameterSet,
    rbar: Exponent,
) -> Result<DriftIntegrability, ThresholdError> {
    let iv = rbar_interval(ps);
    let inside = iv.as_ref().map(|i| i.contains(&rbar)).unwrap_or(false);
    if !inside {
        let (lower, upper) = iv
            .map(|i| (i.lower.to_string(), i.upper.to_string()))
            .unwrap_or_else(|| (ps.r.conjugate().to_string(), "empty".into()));
        return Err(ThresholdError::RbarOutOfRange {
            rbar: rbar.to_string(),
            lower,
            upper,
        });
    }
    let r0_recip = ps.r.recip() + rbar.recip();
    let r0_max = Exponent::from_recip(r0_recip.clone());
    let kr_ok = &ps.alpha * r0_recip < &ps.alpha - Q::one();
    Ok(DriftIntegrability {
        rbar,
        r0_max,
        kr_ok,
    })
}

/// Exponent `delta = 1 - ((-beta + theta Gap)/alpha + d/(p alpha) + 1/alpha) r'`.
pub fn delta_exponent(ps: &ParameterSet, theta: Q) -> Result<Q, ThresholdError> {
    if theta < Q::zero() || theta >= Q::one() {
        return Err(ThresholdError::BadTheta(theta.to_string()));
    }
    let inner = (-&ps.beta + theta * gap(ps) + ps.dq() * ps.p.recip() + Q::one()) / &ps.alpha;
    // r' = inf only when r = 1, where the weak condition already fails
    let rp_recip = ps.r.conjugate().recip();
    if rp_recip.is_zero() {
        return Err(ThresholdError::BadExponent {
            name: "r",
            value: "1 (delta is -inf)".into(),
        });
    }
    Ok(Q::one() - inner / rp_recip)
}

fn strong_witness(ps: &ParameterSet) -> Option<StrongWitness> {
    let g = gap(ps);
    if g <= Q::zero() {
        return None;
    }
    let one = Q::one();
    let two = qi(2);
    let alpha = &ps.alpha;
    let lo = ((&one - alpha / &two) / &g).max(Q::zero());
    let hi = (&one / &g).min(one.clone());
    if lo >= hi {
        return None;
    }
    let theta_bar = (lo + hi) / &two;
    let gamma = &theta_bar * &g;
    // upper bound on s from the time-integrability requirement
    let s_lo = alpha / (alpha - &one);
    let denom = (-&ps.beta + &gamma + ps.dq() * ps.p.recip()) / alpha;
    let s_hi = match &ps.r {
        Exponent::Infinite => Exponent::from_recip(denom),
        Exponent::Finite(r) => Exponent::Finite(r / (&one + denom * r)),
    };
    let s = match &s_hi {
        Exponent::Infinite => Exponent::Finite(&two * &s_lo),
        Exponent::Finite(h) => {
            if *h <= s_lo {
                return Some(StrongWitness {
                    theta_bar,
                    gamma,
                    ell: 0,
                    s: s_hi,
                    lhs: Q::zero(),
                    verified: false,
                });
            }
            Exponent::Finite((&s_lo + h) / &two)
        }
    };
    let base = ((&two * ps.dq()) / alpha)
        .ceil()
        .to_integer()
        .to_u64()
        .unwrap_or(2)
        .max(2);
    let mut ell = base * 8;
    let target = alpha - &one;
    let head = alpha * s.recip();
    let lhs_at = |ell: u64| &head + ps.dq() / Q::from_integer(BigInt::from(ell));
    // ell may be taken as large as needed; jump to the first doubling that
    // clears the target instead of stepping through them
    let room = &target - &head;
    if room > Q::zero() {
        let need = (ps.dq() / &room)
            .floor()
            .to_integer()
            .to_u64()
            .unwrap_or(u64::MAX);
        let mut doublings = 0;
        while ell <= need && doublings < 40 {
            ell *= 2;
            doublings += 1;
        }
    } else {
        ell <<= 40;
    }
    let lhs = lhs_at(ell);
    let gamma_ok = gamma > &one - alpha / &two && gamma < one;
    let ell_ok = Q::from_integer(BigInt::from(ell)) > ((&two * ps.dq()) / alpha).max(two);
    let s_ok = s > Exponent::Finite(s_lo);
    Some(StrongWitness {
        theta_bar,
        gamma,
        ell,
        s,
        verified: lhs < target && gamma_ok && ell_ok && s_ok,
        lhs,
    })
}

/// The three verdicts without intervals or witnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditions {
    pub weak_ok: bool,
    pub strong_ok: bool,
    pub linear_ok: bool,
}

/// Cheap form of [`check_strong`] for sweeps that only need the verdicts.
pub fn conditions(ps: &ParameterSet) -> Conditions {
    Conditions {
        weak_ok: gap(ps) > Q::zero(),
        strong_ok: ps.beta > ps.strong_threshold(),
        linear_ok: check_linear(ps),
    }
}

fn report(ps: &ParameterSet) -> ThresholdReport {
    let g = gap(ps);
    let Conditions {
        weak_ok,
        strong_ok,
        linear_ok,
    } = conditions(ps);
    let r0 = representative_rbar(ps).and_then(|rb| drift_integrability(ps, rb).ok());
    ThresholdReport {
        params: ps.clone(),
        gamma_gap: g,
        weak_ok,
        strong_ok,
        linear_ok,
        rbar_interval: rbar_interval(ps),
        kr_ok: r0.as_ref().map(|r| r.kr_ok).unwrap_or(false),
        r0_interval: r0,
        xz_certificate: if strong_ok { strong_witness(ps) } else { None },
    }
}

/// Report for the weak condition `Gap > 0` (all fields populated).
pub fn check_weak(ps: &ParameterSet) -> ThresholdReport {
    report(ps)
}

/// Report for the strong condition, with a witness when it holds.
pub fn check_strong(ps: &ParameterSet) -> ThresholdReport {
    report(ps)
}

/// `beta > (1 - alpha)/2`.
pub fn check_linear(ps: &ParameterSet) -> bool {
    ps.beta > ps.linear_threshold()
}

/// Side-by-side linear and nonlinear thresholds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearComparison {
    pub linear_threshold: Q,
    pub nonlinear_threshold: Q,
    pub linear_ok: bool,
    pub nonlinear_ok: bool,
}

pub fn compare_linear(ps: &ParameterSet) -> LinearComparison {
    LinearComparison {
        linear_threshold: ps.linear_threshold(),
        nonlinear_threshold: ps.weak_threshold(),
        linear_ok: check_linear(ps),
        nonlinear_ok: gap(ps) > Q::zero(),
    }
}

impl ThresholdReport {
    pub fn csv_header() -> &'static [&'static str] {
        &[
            "alpha",
            "beta",
            "p",
            "q",
            "r",
            "d",
            "gap",
            "weak_ok",
            "strong_ok",
            "linear_ok",
            "rbar_lower",
            "rbar_upper",
            "rbar_rep",
            "r0_max",
            "kr_ok",
            "xz_gamma",
            "xz_ell",
            "xz_s",
            "xz_verified",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let ps = &self.params;
        let (lo, hi) = match &self.rbar_interval {
            Some(i) => (i.lower.to_string(), i.upper.to_string()),
            None => ("".into(), "".into()),
        };
        let (rb, r0) = match &self.r0_interval {
            Some(x) => (x.rbar.to_string(), x.r0_max.to_string()),
            None => ("".into(), "".into()),
        };
        let (xg, xl, xs, xv) = match &self.xz_certificate {
            Some(w) => (
                w.gamma.to_string(),
                w.ell.to_string(),
                w.s.to_string(),
                w.verified.to_string(),
            ),
            None => ("".into(), "".into(), "".into(), "".into()),
        };
        vec![
            ps.alpha.to_string(),
            ps.beta.to_string(),
            ps.p.to_string(),
            ps.q.to_string(),
            ps.r.to_string(),
            ps.d.to_string(),
            self.gamma_gap.to_string(),
            self.weak_ok.to_string(),
            self.strong_ok.to_string(),
            self.linear_ok.to_string(),
            lo,
            hi,
            rb,
            r0,
            self.kr_ok.to_string(),
            xg,
            xl,
            xs,
            xv,
        ]
    }
}

impl fmt::Display for ThresholdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps = &self.params;
        writeln!(f, "parameters: {ps}")?;
        writeln!(
            f,
            "gap: {} (~{:.6})",
            self.gamma_gap,
            q_to_f64(&self.gamma_gap)
        )?;
        writeln!(
            f,
            "weak:   {} (beta > {})",
            verdict(self.weak_ok),
            ps.weak_threshold()
        )?;
        writeln!(
            f,
            "strong: {} (beta > {})",
            verdict(self.strong_ok),
            ps.strong_threshold()
        )?;
        writeln!(
            f,
            "linear: {} (beta > {})",
            verdict(self.linear_ok),
            ps.linear_threshold()
        )?;
        match &self.rbar_interval {
            Some(i) => writeln!(f, "rbar interval: [{}, {})", i.lower, i.upper)?,
            None => writeln!(f, "rbar interval: empty")?,
        }
        if let Some(r0) = &self.r0_interval {
            writeln!(
                f,
                "drift integrability at rbar={}: r0 in (0, {}], Krylov-Rockner criterion {}",
                r0.rbar,
                r0.r0_max,
                verdict(r0.kr_ok)
            )?;
        }
        if let Some(w) = &self.xz_certificate {
            writeln!(
                f,
                "strong witness: gamma={} ell={} s={} (alpha/s + d/ell = {} vs alpha-1 = {}) {}",
                w.gamma,
                w.ell,
                w.s,
                w.lhs,
                &ps.alpha - Q::one(),
                if w.verified {
                    "verified"
                } else {
                    "NOT verified"
                }
            )?;
        }
        writeln!(
            f,
            "note: for structured drifts the literature lowers the threshold to (2-2alpha)/3 = {}; not checked here",
            (qi(2) - qi(2) * &ps.alpha) / qi(3)
        )
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fails"
    }
}

/// Absolute value helper kept for callers working with gaps.
pub fn q_abs(q: &Q) -> Q {
    q.abs()
}

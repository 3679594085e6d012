//! Symmetric stable heat kernels and semigroups as spectral multipliers.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, Grid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("stability index must lie in (0, 2], got {0}")]
    BadAlpha(f64),
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("time {t:.3e} is below the grid resolution floor {floor:.3e} = (2 dx)^alpha")]
    BelowFloor { t: f64, floor: f64 },
    #[error("axis {axis} out of range for a {d}-dimensional grid")]
    BadAxis { axis: usize, d: usize },
}

/// Shape of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Rotation-invariant law, symbol `|xi|^alpha`.
    #[default]
    Isotropic,
    /// Independent one-dimensional laws per axis, symbol `sum_i |xi_i|^alpha`.
    CoordinateProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableLaw {
    pub alpha: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl StableLaw {
    pub fn new(alpha: f64, mode: NoiseMode) -> Result<Self, SemigroupError> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SemigroupError::BadAlpha(alpha));
        }
        Ok(StableLaw { alpha, mode })
    }

    pub fn isotropic(alpha: f64) -> Result<Self, SemigroupError> {
        Self::new(alpha, NoiseMode::Isotropic)
    }

    pub fn validate(&self) -> Result<(), SemigroupError> {
        Self::new(self.alpha, self.mode).map(|_| ())
    }

    /// The symbol `psi`, so that the semigroup multiplier is `exp(-t psi)`.
    pub fn symbol(&self, xi: &[f64]) -> f64 {
        match self.mode {
            NoiseMode::Isotropic => {
                let r2: f64 = xi.iter().map(|x| x * x).sum();
                if self.alpha == 2.0 {
                    r2
                } else {
                    r2.powf(self.alpha / 2.0)
                }
            }
            NoiseMode::CoordinateProduct => {
                if self.alpha == 2.0 {
                    xi.iter().map(|x| x * x).sum()
                } else {
                    xi.iter().map(|x| x.abs().powf(self.alpha)).sum()
                }
            }
        }
    }

    /// Symbol evaluated on every spectral index of `grid`.
    pub fn symbol_table(&self, grid: &Grid) -> Vec<f64> {
        let d = grid.dim();
        (0..grid.len())
            .map(|i| self.symbol(&grid.wave(i)[..d]))
            .collect()
    }

    fn check_floor(&self, grid: &Grid, t: f64) -> Result<(), SemigroupError> {
        if t <= 0.0 || t.is_nan() {
            return Err(SemigroupError::NonPositiveTime(t));
        }
        let floor = grid.resolution_floor(self.alpha);
        if t < floor * (1.0 - 1e-12) {
            return Err(SemigroupError::BelowFloor { t, floor });
        }
        Ok(())
    }
}

/// Gradient symbol `i xi_axis`, with the Nyquist plane zeroed so odd fields stay real.
pub(crate) fn grad_symbol(grid: &Grid, flat: usize, axis: usize) -> Complex64 {
    if grid.is_nyquist(flat, axis) {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::new(0.0, grid.wave(flat)[axis])
    }
}

/// Density of the stable law at time `t`.
pub fn heat_kernel(grid: &Grid, t: f64, law: &StableLaw) -> Result<Field, SemigroupError> {
    law.validate()?;
    law.check_floor(grid, t)?;
    let psi = law.symbol_table(grid);
    let coeffs = psi
        .iter()
        .map(|p| Complex64::new((-t * p).exp(), 0.0))
        .collect();
    let k = crate::grid::SpectralField::from_coeffs(grid, coeffs)
        .expect("length matches")
        .to_physical();
    k.warn_boundary("heat kernel");
    Ok(k)
}

/// `P_t f`; `t = 0` returns `f` unchanged.
pub fn semigroup_apply(f: &Field, t: f64, law: &StableLaw) -> Result<Field, SemigroupError> {
    law.validate()?;
    if t < 0.0 || t.is_nan() {
        return Err(SemigroupError::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    let psi = law.symbol_table(f.grid());
    let out = f
        .to_spectral()
        .multiply(|i| Complex64::new((-t * psi[i]).exp(), 0.0))
        .to_physical();
    Ok(out)
}

/// Partial derivative along `axis` (0-based) of the heat kernel at time `t`.
pub fn grad_heat_kernel(
    grid: &Grid,
    t: f64,
    law: &StableLaw,
    axis: usize,
) -> Result<Field, SemigroupError> {
    law.validate()?;
    if axis >= grid.dim() {
        return Err(SemigroupError::BadAxis {
            axis,
            d: grid.dim(),
        });
    }
    law.check_floor(grid, t)?;
    let psi = law.symbol_table(grid);
    let coeffs = (0..grid.len())
        .map(|i| grad_symbol(grid, i, axis) * (-t * psi[i]).exp())
        .collect();
    Ok(crate::grid::SpectralField::from_coeffs(grid, coeffs)
        .expect("length matches")
        .to_physical())
}

/// `d^n/dv^n (p_v * f)`, the spectral multiplier `(-psi)^n exp(-v psi)`.
pub fn thermic_derivative(
    f: &Field,
    v: f64,
    n: u32,
    law: &StableLaw,
) -> Result<Field, SemigroupError> {
    law.validate()?;
    law.check_floor(f.grid(), v)?;
    let psi = law.symbol_table(f.grid());
    Ok(f.to_spectral()
        .multiply(|i| Complex64::new((-psi[i]).powi(n as i32) * (-v * psi[i]).exp(), 0.0))
        .to_physical())
}

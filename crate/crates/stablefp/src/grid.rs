//! Periodic grids, fields, spectral transforms, convolution and Lebesgue norms.
//!
//! The domain is the torus `[-L, L)^d` sampled at `x_j = -L + j*dx`. The
//! continuous transform `F f(xi) = \int f(x) e^{-i x.xi} dx` is approximated by
//! `dx^d * sum_j f_j e^{-i x_j xi_k}` with `xi_k` the DFT frequencies scaled by
//! `pi / L`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Fraction of the half-width treated as the outer shell for boundary mass.
pub const BOUNDARY_SHELL: f64 = 0.1;
/// Boundary mass above which heavy-tailed constructions log a warning.
pub const BOUNDARY_WARN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 1 or 2, got {0}")]
    BadDimension(usize),
    #[error("points per axis must be a power of two >= 32, got {0}")]
    BadPointCount(usize),
    #[error("half-width must be positive and finite, got {0}")]
    BadExtent(f64),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("exponent must be >= 1, got {0}")]
    BadExponent(f64),
    #[error("expected {expected} values, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("malformed field dump: {0}")]
    BadDump(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GridError {
    fn from(e: std::io::Error) -> Self {
        GridError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    d: usize,
    n: usize,
    half_width: f64,
    dx: f64,
}

impl Grid {
    pub fn new(d: usize, n: usize, half_width: f64) -> Result<Self, GridError> {
        if d != 1 && d != 2 {
            return Err(GridError::BadDimension(d));
        }
        if n < 32 || !n.is_power_of_two() {
            return Err(GridError::BadPointCount(n));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(GridError::BadExtent(half_width));
        }
        Ok(Grid {
            d,
            n,
            half_width,
            dx: 2.0 * half_width / n as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Total number of nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.d as i32)
    }

    /// Smallest time a stable kernel of index `alpha` can be represented at.
    pub fn resolution_floor(&self, alpha: f64) -> f64 {
        (2.0 * self.dx).powf(alpha)
    }

    /// Node coordinates along one axis.
    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| -self.half_width + j as f64 * self.dx)
            .collect()
    }

    /// Signed DFT frequencies along one axis, scaled by `pi / L`.
    pub fn axis_frequencies(&self) -> Vec<f64> {
        let scale = std::f64::consts::PI / self.half_width;
        (0..self.n)
            .map(|k| signed_index(k, self.n) as f64 * scale)
            .collect()
    }

    /// Multi-index of a flat (row-major) index; unused axes are zero.
    pub fn unflatten(&self, flat: usize) -> [usize; 2] {
        if self.d == 1 {
            [flat, 0]
        } else {
            [flat / self.n, flat % self.n]
        }
    }

    /// Coordinates of node `flat`.
    pub fn point(&self, flat: usize) -> [f64; 2] {
        let idx = self.unflatten(flat);
        let mut p = [0.0; 2];
        for a in 0..self.d {
            p[a] = -self.half_width + idx[a] as f64 * self.dx;
        }
        p
    }

    /// Frequency vector of spectral index `flat`.
    pub fn wave(&self, flat: usize) -> [f64; 2] {
        let idx = self.unflatten(flat);
        let scale = std::f64::consts::PI / self.half_width;
        let mut w = [0.0; 2];
        for a in 0..self.d {
            w[a] = signed_index(idx[a], self.n) as f64 * scale;
        }
        w
    }

    /// Whether spectral index `flat` sits on the Nyquist plane of `axis`.
    pub fn is_nyquist(&self, flat: usize, axis: usize) -> bool {
        self.unflatten(flat)[axis] == self.n / 2
    }

    /// Flat index of the node nearest to `x` (periodically wrapped).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for xa in &x[..self.d] {
            let j = ((xa + self.half_width) / self.dx).round() as i64;
            let j = j.rem_euclid(self.n as i64) as usize;
            flat = flat * self.n + j;
        }
        flat
    }

    fn phase(&self, flat: usize) -> f64 {
        let idx = self.unflatten(flat);
        let s: usize = idx[..self.d].iter().sum();
        if s.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

fn signed_index(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Real grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
    tag: Option<String>,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Self {
        Field {
            grid: *grid,
            values: vec![0.0; grid.len()],
            tag: None,
        }
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Field {
            grid: *grid,
            values: vec![c; grid.len()],
            tag: None,
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::BadLength {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Field {
            grid: *grid,
            values,
            tag: None,
        })
    }

    /// Samples `f` at every node; `f` receives a slice of length `d`.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let d = grid.dim();
        let values = (0..grid.len())
            .map(|i| {
                let p = grid.point(i);
                f(&p[..d])
            })
            .collect();
        Field {
            grid: *grid,
            values,
            tag: None,
        }
    }

    /// Single-cell field of unit mass at the node nearest to `center`.
    pub fn point_mass(grid: &Grid, center: &[f64]) -> Self {
        let mut f = Field::zeros(grid);
        f.values[grid.nearest_node(center)] = 1.0 / grid.cell_volume();
        f
    }

    /// Isotropic Gaussian density with the given mean and per-coordinate variance.
    pub fn gaussian(grid: &Grid, mean: &[f64], var: f64) -> Self {
        let d = grid.dim();
        let norm = (2.0 * std::f64::consts::PI * var).powf(-(d as f64) / 2.0);
        Field::from_fn(grid, |x| {
            let r2: f64 = (0..d).map(|a| (x[a] - mean[a]).powi(2)).sum();
            norm * (-r2 / (2.0 * var)).exp()
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn tag(&self) -> Option<&str> {
        self.tag.as_deref()
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            tag: self.tag.clone(),
        }
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    fn zip(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field, GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch);
        }
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            tag: None,
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field, GridError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field, GridError> {
        self.zip(other, |a, b| a - b)
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Field) -> Result<Field, GridError> {
        self.zip(other, |a, b| a * b)
    }

    /// `a*self + b*other`.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field, GridError> {
        self.zip(other, |x, y| a * x + b * y)
    }

    /// Mass in the outer shell `max_a |x_a| >= 0.9 L`, measured in L1.
    pub fn boundary_mass(&self) -> f64 {
        let cut = (1.0 - BOUNDARY_SHELL) * self.grid.half_width();
        let d = self.grid.dim();
        let mut m = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.point(i);
            if p[..d].iter().any(|x| x.abs() >= cut) {
                m += v.abs();
            }
        }
        m * self.grid.cell_volume()
    }

    pub(crate) fn warn_boundary(&self, what: &str) {
        let bm = self.boundary_mass();
        if bm > BOUNDARY_WARN {
            log::warn!("{what}: boundary mass {bm:.3e} exceeds {BOUNDARY_WARN:.0e}");
        }
    }

    pub fn to_spectral(&self) -> SpectralField {
        let g = self.grid;
        let mut data: Vec<Complex64> = self
            .values
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft_nd(&mut data, &g, false);
        let vol = g.cell_volume();
        for (i, c) in data.iter_mut().enumerate() {
            *c *= vol * g.phase(i);
        }
        SpectralField {
            grid: g,
            coeffs: data,
        }
    }

    /// Writes the field in the dump format: `key:value` header lines, a blank
    /// line, then little-endian f64 values in row-major order.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        writeln!(w, "dimension:{}", self.grid.dim())?;
        writeln!(w, "n:{}", self.grid.n())?;
        writeln!(w, "L:{:?}", self.grid.half_width())?;
        writeln!(w, "tag:{}", self.tag.as_deref().unwrap_or(""))?;
        writeln!(w, "endianness:little")?;
        writeln!(w)?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Field, GridError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let sep = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| GridError::BadDump("missing blank line after header".into()))?;
        let header = std::str::from_utf8(&bytes[..sep])
            .map_err(|_| GridError::BadDump("header is not utf-8".into()))?;
        let mut kv = HashMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| GridError::BadDump(format!("bad header line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| GridError::BadDump(format!("missing key {k}")))
        };
        let bad = |k: &str| GridError::BadDump(format!("unparsable {k}"));
        let d: usize = get("dimension")?
            .trim()
            .parse()
            .map_err(|_| bad("dimension"))?;
        let n: usize = get("n")?.trim().parse().map_err(|_| bad("n"))?;
        let l: f64 = get("L")?.trim().parse().map_err(|_| bad("L"))?;
        if get("endianness")?.trim() != "little" {
            return Err(GridError::BadDump(
                "only little-endian payloads are supported".into(),
            ));
        }
        let tag = kv.get("tag").filter(|t| !t.is_empty()).cloned();
        let grid = Grid::new(d, n, l)?;
        let payload = &bytes[sep + 2..];
        if payload.len() != 8 * grid.len() {
            return Err(GridError::BadLength {
                expected: grid.len(),
                got: payload.len() / 8,
            });
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut f = Field::from_values(&grid, values)?;
        f.tag = tag;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let file = std::fs::File::create(path)?;
        self.write_dump(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Field, GridError> {
        Field::read_dump(std::fs::File::open(path)?)
    }
}

/// Scaled DFT of a [`Field`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn from_coeffs(grid: &Grid, coeffs: Vec<Complex64>) -> Result<Self, GridError> {
        if coeffs.len() != grid.len() {
            return Err(GridError::BadLength {
                expected: grid.len(),
                got: coeffs.len(),
            });
        }
        Ok(SpectralField {
            grid: *grid,
            coeffs,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    /// Inverse transform; the imaginary part is discarded.
    pub fn to_physical(&self) -> Field {
        let g = self.grid;
        let vol = g.cell_volume();
        let mut data: Vec<Complex64> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * (g.phase(i) / vol))
            .collect();
        fft_nd(&mut data, &g, true);
        let norm = 1.0 / g.len() as f64;
        Field {
            grid: g,
            values: data.iter().map(|c| c.re * norm).collect(),
            tag: None,
        }
    }

    /// Pointwise multiplication by a symbol `m(flat_index)`.
    pub fn multiply(&self, m: impl Fn(usize) -> Complex64) -> SpectralField {
        SpectralField {
            grid: self.grid,
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| c * m(i))
                .collect(),
        }
    }

    pub fn mul(&self, other: &SpectralField) -> Result<SpectralField, GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch);
        }
        Ok(SpectralField {
            grid: self.grid,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// `sum |c_k|^2 / (2L)^d`, equal to the squared L2 norm of the field.
    pub fn energy(&self) -> f64 {
        let period = (2.0 * self.grid.half_width()).powi(self.grid.dim() as i32);
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / period
    }
}

/// Periodic convolution approximating `\int f(x-y) g(y) dy`.
pub fn convolve(f: &Field, g: &Field) -> Result<Field, GridError> {
    if f.grid != g.grid {
        return Err(GridError::GridMismatch);
    }
    Ok(f.to_spectral().mul(&g.to_spectral())?.to_physical())
}

/// `(sum |f|^ell dx^d)^{1/ell}`, or `max |f|` for `ell = inf`.
pub fn lp_norm(f: &Field, ell: f64) -> Result<f64, GridError> {
    if ell.is_nan() || ell < 1.0 {
        return Err(GridError::BadExponent(ell));
    }
    Ok(lp_norm_unchecked(&f.values, ell, f.grid.cell_volume()))
}

pub(crate) fn lp_norm_unchecked(values: &[f64], ell: f64, vol: f64) -> f64 {
    if ell.is_infinite() {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else if ell == 1.0 {
        values.iter().map(|v| v.abs()).sum::<f64>() * vol
    } else if ell == 2.0 {
        (values.iter().map(|v| v * v).sum::<f64>() * vol).sqrt()
    } else {
        let mx = values.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if mx == 0.0 {
            return 0.0;
        }
        let s: f64 = values.iter().map(|v| (v.abs() / mx).powf(ell)).sum();
        mx * (s * vol).powf(1.0 / ell)
    }
}

type Plan = Arc<dyn Fft<f64>>;

type PlanCache = HashMap<(usize, bool), Plan>;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, PlanCache)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Plan {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Unnormalized in-place DFT over all axes of a row-major array.
pub(crate) fn fft_nd(data: &mut [Complex64], grid: &Grid, inverse: bool) {
    let n = grid.n();
    let fft = plan(n, inverse);
    // rows are contiguous
    fft.process(data);
    if grid.dim() == 2 {
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            fft.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_grid_examples() {
        let g = Grid::new(1, 256, 20.0).unwrap();
        assert_eq!(g.dx(), 40.0 / 256.0);
        let g2 = Grid::new(2, 64, 10.0).unwrap();
        assert_eq!(g2.len(), 4096);
        assert_eq!(Grid::new(1, 100, 20.0), Err(GridError::BadPointCount(100)));
        assert_eq!(Grid::new(3, 64, 1.0), Err(GridError::BadDimension(3)));
        assert_eq!(Grid::new(1, 16, 1.0), Err(GridError::BadPointCount(16)));
        assert!(matches!(
            Grid::new(1, 64, 0.0),
            Err(GridError::BadExtent(_))
        ));
    }

    #[test]
    fn frequencies_are_scaled_dft_set() {
        let g = Grid::new(1, 32, 4.0).unwrap();
        let f = g.axis_frequencies();
        let s = std::f64::consts::PI / 4.0;
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], s);
        assert_eq!(f[16], -16.0 * s);
        assert_eq!(f[31], -s);
    }

    #[test]
    fn gaussian_spectrum_matches_closed_form() {
        // F of N(0, v) is exp(-v xi^2 / 2)
        let g = Grid::new(1, 256, 20.0).unwrap();
        let f = Field::gaussian(&g, &[0.0], 1.0);
        let s = f.to_spectral();
        for (i, c) in s.coeffs().iter().enumerate() {
            let xi = g.wave(i)[0];
            assert!((c.re - (-xi * xi / 2.0).exp()).abs() < 1e-12, "{i}");
            assert!(c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_1d_and_2d() {
        for g in [
            Grid::new(1, 128, 5.0).unwrap(),
            Grid::new(2, 32, 3.0).unwrap(),
        ] {
            let f = Field::from_fn(&g, |x| (x[0]).sin() + 0.3 * x.iter().sum::<f64>().cos());
            let back = f.to_spectral().to_physical();
            let err = lp_norm(&back.sub(&f).unwrap(), 2.0).unwrap();
            assert!(err < 1e-12 * lp_norm(&f, 2.0).unwrap());
        }
    }

    #[test]
    fn convolution_with_delta_is_identity() {
        let g = Grid::new(1, 128, 8.0).unwrap();
        let f = Field::from_fn(&g, |x| (-(x[0] - 1.0).powi(2)).exp() * x[0]);
        let delta = Field::point_mass(&g, &[0.0]);
        let c = convolve(&f, &delta).unwrap();
        assert!(lp_norm(&c.sub(&f).unwrap(), f64::INFINITY).unwrap() < 1e-10);
    }

    #[test]
    fn gaussian_convolution_closed_form() {
        let g = Grid::new(1, 512, 20.0).unwrap();
        let a = Field::gaussian(&g, &[0.0], 0.5);
        let b = Field::gaussian(&g, &[0.0], 1.5);
        let c = convolve(&a, &b).unwrap();
        let exact = Field::gaussian(&g, &[0.0], 2.0);
        assert!(lp_norm(&c.sub(&exact).unwrap(), f64::INFINITY).unwrap() < 1e-8);
    }

    #[test]
    fn gaussian_convolution_2d() {
        let g = Grid::new(2, 64, 10.0).unwrap();
        let a = Field::gaussian(&g, &[0.5, -0.5], 0.8);
        let b = Field::gaussian(&g, &[-0.5, 1.0], 1.2);
        let c = convolve(&a, &b).unwrap();
        let exact = Field::gaussian(&g, &[0.0, 0.5], 2.0);
        assert!(lp_norm(&c.sub(&exact).unwrap(), f64::INFINITY).unwrap() < 1e-8);
    }

    #[test]
    fn lp_norm_examples() {
        let g = Grid::new(1, 256, 20.0).unwrap();
        let cell = Field::point_mass(&g, &[0.3]);
        assert!((lp_norm(&cell, 1.0).unwrap() - 1.0).abs() < 1e-14);
        let z = Field::zeros(&g);
        for ell in [1.0, 1.5, 2.0, f64::INFINITY] {
            assert_eq!(lp_norm(&z, ell).unwrap(), 0.0);
        }
        let phi = Field::gaussian(&g, &[0.0], 1.0);
        let expected = (1.0 / (2.0 * std::f64::consts::PI.sqrt())).sqrt();
        assert!((lp_norm(&phi, 2.0).unwrap() - expected).abs() < 1e-4);
        assert!((expected - 0.531126).abs() < 1e-6);
        assert_eq!(lp_norm(&phi, 0.5), Err(GridError::BadExponent(0.5)));
    }

    #[test]
    fn general_exponent_matches_direct_sum() {
        let g = Grid::new(1, 64, 3.0).unwrap();
        let f = Field::from_fn(&g, |x| x[0].cos() + 0.5);
        let direct: f64 = f.values().iter().map(|v| v.abs().powf(3.0)).sum::<f64>() * g.dx();
        assert!((lp_norm(&f, 3.0).unwrap() - direct.powf(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn boundary_mass_sees_heavy_tails() {
        let g = Grid::new(1, 256, 10.0).unwrap();
        assert!(Field::gaussian(&g, &[0.0], 1.0).boundary_mass() < 1e-12);
        let cauchy = Field::from_fn(&g, |x| 1.0 / (std::f64::consts::PI * (1.0 + x[0] * x[0])));
        // the shell 9 <= |x| < 10 holds two tails of roughly 1/(pi x^2)
        let bm = cauchy.boundary_mass();
        assert!(
            (bm - 2.0 / std::f64::consts::PI * (1.0 / 9.0 - 1.0 / 10.0)).abs() < 2e-3,
            "{bm}"
        );
        assert!(bm > BOUNDARY_WARN);
    }

    #[test]
    fn parseval() {
        let g = Grid::new(2, 32, 4.0).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] * x[1]).sin() * (-x[0] * x[0]).exp());
        let e = f.to_spectral().energy();
        let l2 = lp_norm(&f, 2.0).unwrap().powi(2);
        assert!((e - l2).abs() < 1e-10 * l2);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = Field::zeros(&Grid::new(1, 64, 1.0).unwrap());
        let b = Field::zeros(&Grid::new(1, 64, 2.0).unwrap());
        assert_eq!(convolve(&a, &b), Err(GridError::GridMismatch));
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let g = Grid::new(2, 32, 0.1 + 0.2).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] * 7.3).sin() / 3.0 + x[1]).with_tag("s=0.125");
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let back = Field::read_dump(&buf[..]).unwrap();
        assert_eq!(back.grid(), f.grid());
        assert_eq!(back.tag(), Some("s=0.125"));
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let untagged = Field::zeros(&g);
        let mut buf = Vec::new();
        untagged.write_dump(&mut buf).unwrap();
        assert_eq!(Field::read_dump(&buf[..]).unwrap(), untagged);
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let g = Grid::new(1, 32, 1.0).unwrap();
        let mut buf = Vec::new();
        Field::zeros(&g).write_dump(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Field::read_dump(&buf[..]),
            Err(GridError::BadLength { .. })
        ));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let g = Grid::new(1, 32, 1.0).unwrap();
        let mut v = vec![0.0; 32];
        v[7] = f64::NAN;
        assert_eq!(Field::from_values(&g, v), Err(GridError::NonFinite(7)));
    }
}

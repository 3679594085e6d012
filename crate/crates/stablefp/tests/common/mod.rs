#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stablefp::solver::{GridSpec, SolverConfig};
use stablefp::threshold::ParameterInput;
use stablefp::{DensityTrajectory, Field, Grid, InitialLaw, KernelSpec, StableLaw};

pub const INF: f64 = f64::INFINITY;

pub fn params(alpha: f64, beta: f64) -> ParameterInput {
    ParameterInput {
        alpha,
        beta,
        p: INF,
        q: INF,
        r: INF,
        d: 1,
    }
}

/// Reference singular configuration on `[-10, 10)` with 512 points.
pub fn reference_config(
    kernel: KernelSpec,
    eps: Option<f64>,
    initial: InitialLaw,
    horizon: f64,
) -> SolverConfig {
    SolverConfig::new_1d(
        params(2.0, -0.5),
        kernel,
        eps,
        GridSpec {
            n: 512,
            half_width: 10.0,
        },
        initial,
        horizon,
    )
}

pub fn gaussian(var: f64) -> InitialLaw {
    InitialLaw::Gaussian {
        mean: vec![0.0],
        var,
    }
}

/// Closed form for a constant drift `c`: the free evolution translated by
/// `c (s - t)`, computed as a phase factor on the transform.
pub fn translated_free_evolution(cfg: &SolverConfig, c: f64) -> DensityTrajectory {
    let grid = cfg.build_grid().unwrap();
    let mu = cfg.initial.as_field(&grid).unwrap();
    let law: StableLaw = cfg.law;
    let psi = law.symbol_table(&grid);
    let mu_hat = mu.to_spectral();
    let times = cfg.times();
    let slices: Vec<Field> = times
        .iter()
        .map(|&s| {
            let dt = s - times[0];
            mu_hat
                .multiply(|k| {
                    let xi = grid.wave(k)[0];
                    Complex64::from_polar((-dt * psi[k]).exp(), -xi * c * dt)
                })
                .to_physical()
        })
        .collect();
    DensityTrajectory::new(times, slices).unwrap()
}

/// Signed sum of three 1-d Gaussians with random centers and widths.
pub fn random_smooth(grid: &Grid, rng: &mut ChaCha8Rng) -> Field {
    let mut f = Field::zeros(grid);
    for _ in 0..3 {
        let w = rng.random_range(-1.0..1.0);
        let c = rng.random_range(-3.0..3.0);
        let v = rng.random_range(0.3..2.0);
        f = f.axpby(1.0, &Field::gaussian(grid, &[c], v), w).unwrap();
    }
    f
}

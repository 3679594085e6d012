//! Spectral toolkit for nonlinear Fokker-Planck equations driven by symmetric
//! stable noise with singular interaction kernels.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod besov;
pub mod experiments;
pub mod grid;
pub mod kernel;
pub mod particles;
pub mod semigroup;
pub mod solver;
pub mod threshold;
pub mod trajectory;
pub mod util;

pub use besov::{
    besov_norm, besov_parts, check_duality, check_fgh, check_young, thermic_part,
    weighted_bochner_norm, BesovError, BesovIndex, BesovParts, FghIndices, InequalityReport,
    ThermicSettings, YoungSplit,
};
pub use grid::{convolve, lp_norm, Field, Grid, GridError, SpectralField};
pub use kernel::{
    mollifier_convergence, mollify, realize_kernel, ClaimedClass, ConvergenceTable, KernelError,
    KernelFamily, KernelSpec, MollifiedKernel, TimeProfile,
};
pub use particles::{
    compare_to_pde, empirical_density, sample_stable_increment, simulate, step, ParticleEnsemble,
    ParticleError, ParticleRun, SimConfig,
};
pub use semigroup::{
    grad_heat_kernel, heat_kernel, semigroup_apply, thermic_derivative, NoiseMode, SemigroupError,
    StableLaw,
};
pub use solver::{
    apriori_report, duhamel_rhs, epsilon_stability_study, free_evolution, frozen_drift_solve,
    nl_drift, picard_solve, uniqueness_probe, weak_form_residual, InitialLaw, PicardOutcome,
    Quadrature, SolverConfig, SolverError,
};
pub use threshold::{
    check_linear, check_strong, check_weak, compare_linear, delta_exponent, drift_integrability,
    gap, Exponent, ParameterInput, ParameterSet, ThresholdError, ThresholdReport,
};
pub use trajectory::{DensityTrajectory, SliceDiagnostics, TrajectoryError};

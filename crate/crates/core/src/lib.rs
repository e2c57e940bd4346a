//! Trajectorial entropy dissipation for degenerate nonlinear diffusions
//! `∂ₜp = Δf(p)` on bounded boxes with no-flux boundaries.
//!
//! The crate bundles a finite-volume solver, a reflected-SDE particle
//! simulator driven by the solver's density, the entropy and dissipation
//! functionals, and one-dimensional optimal transport tools used to check
//! Wasserstein slopes and the HWI inequality.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod entropy;
pub mod error;
pub mod grid;
pub mod nonlinearity;
pub mod pde;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod transport;

pub use entropy::{
    dissipation_field, dissipation_functional, entropy_functional, perturbed_dissipation_field, verify_identity,
    IdentityReport,
};
pub use error::{Error, Result};
pub use grid::{DensityField, Grid, Point};
pub use nonlinearity::{Nonlinearity, NonlinearityKind, NonlinearitySpec};
pub use pde::{cfl_dt, cfl_dt_dividing, solve, step_diffusion, step_perturbed, PdeRun, PerturbationPotential, SolveOptions};
pub use rng::rng_stream;
pub use sde::{simulate_ensemble, EnsembleOptions, EnsembleResult, ParticleState, TrajectoryRecord};
pub use transport::{
    displacement_interpolation, entropy_slope_comparison, hwi_check, w2_1d, w2_discrete, HwiResult, SlopeReport,
    TransportPlan1D,
};

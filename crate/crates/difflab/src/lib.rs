//! Numerical laboratory for diffusion processes: forward simulation, Fokker–Planck and
//! backward Kolmogorov grid solvers, the optimal-control action and its stationarity
//! conditions, Schrödinger-bridge solving, and denoising score matching.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`) through
//! [`Real`]; the aliases at the crate root fix it to `f64`. Training, sampling and the
//! experiment runner work in `f64`.

pub mod action;
pub mod analytic_kernels;
pub mod bridge;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod exact_mixture;
pub mod pde_grid;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod score_training;
pub mod sde_sim;
pub mod stats;
pub mod suites;

pub use error::{Error, Result};
pub use real::Real;

pub type TimeGrid = schedule::TimeGrid<f64>;
pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type ProcessSpec = sde_sim::ProcessSpec<f64>;
pub type Ensemble = sde_sim::Ensemble<f64>;
pub type GaussianDensity = analytic_kernels::GaussianDensity<f64>;
pub type GaussianMixture = exact_mixture::GaussianMixture<f64>;
pub type MixturePath = exact_mixture::MixturePath<f64>;
pub type SpatialGrid = pde_grid::SpatialGrid<f64>;
pub type Field = pde_grid::Field<f64>;
pub type CellSystem = divergence::CellSystem<f64>;

pub type TimeGrid32 = schedule::TimeGrid<f32>;
pub type NoiseSchedule32 = schedule::NoiseSchedule<f32>;
pub type GaussianDensity32 = analytic_kernels::GaussianDensity<f32>;
pub type GaussianMixture32 = exact_mixture::GaussianMixture<f32>;
pub type Field32 = pde_grid::Field<f32>;

//! Deep BSDE solver for PIDEs driven by infinite-activity Lévy noise, with
//! small-jump truncation, optional Gaussian compensation and a cell
//! partition of the remaining jump space.

pub mod error;
pub mod io;
pub mod levy;
pub mod models;
pub mod nn;
pub mod paths;
pub mod quadrature;
pub mod reference;
pub mod rng;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use levy::{
    build_partition, gamma_quadrature_error, small_jump_covariance, truncation_variance, Cell, JumpPartition,
    JumpRealization, LevyMeasure, RadialDensity,
};
pub use nn::{AdamConfig, AdamState, Mlp, MlpGrad};
pub use paths::{
    generate_increments, simulate_forward, Driver, ForwardJumps, IncrementBatch, JumpCoefficients, ModelCoefficients,
    PathBatch, TimeGrid,
};
pub use solver::{run_algorithm1, ResidualTail, SolverConfig, StepNetworks, TrainedSolution};

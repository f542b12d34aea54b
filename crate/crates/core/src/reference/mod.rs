//! Independent oracles: regression-based conditional expectations, the
//! intermediate backward scheme, nonlocal operators by quadrature,
//! projection errors and the small-jump strong-rate experiment.

pub mod intermediate;
pub mod operators;
pub mod projection;
pub mod rates;
pub mod regression;

pub use intermediate::{orthogonal_residual_variance, solve_intermediate, Continuation, IntermediateConfig, IntermediateSolution, IntermediateStep};
pub use operators::{
    apply_local, apply_nonlocal_b, apply_nonlocal_j, generator, pde_residual, CosineSolution, EquationSpec, FnSolution, GeneratorParts,
    ManufacturedDriver, SpaceTimeFunction, DEFAULT_INNER_RADIUS,
};
pub use projection::{
    cell_average, compensated_isometry, project_cell, project_time, projection_error_estimates, time_projection_error, ClosedFormProcesses,
    ProjectionErrors,
};
pub use rates::{smalljump_rate_experiment, RateRow, RateTable};
pub use regression::{BasisRegression, LeastSquares, PolynomialBasis, SharedRegression};

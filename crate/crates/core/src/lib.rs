//! Density flows of nonlocal Fokker-Planck equations, their derivatives with
//! respect to the initial density, the associated mean-field SDEs, and the
//! value function `V(t, x, mu) = E[Phi(X_T, m(T))]` with numerical checks of
//! the master equation it solves.
//!
//! Everything is one-dimensional and lives on a uniform [`Grid1D`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod config;
pub mod error;
pub mod fp;
pub mod functions;
pub mod grid;
pub mod linearized;
pub mod output;
pub mod path;
pub mod scenario;
pub mod sde;
pub mod stats;
pub mod value;
pub mod verify;
mod tridiag;

pub use coefficients::{
    functional_derivative_check, make_state_dependent_model, make_state_invariant_model,
    CoefficientModel, Field, FieldState, SmoothFunctional,
};
pub use config::{load_config, parse_config};
pub use error::{Error, Result};
pub use fp::{density_time_derivative, flow_property_check, norm_report, solve_fp, FpConfig, NormReport};
pub use functions::{Outer, Profile};
pub use grid::{
    l2_distance, l2_inner, l2_norm, quadrature, sobolev_norm, spatial_derivative, Grid1D,
    GridFunction,
};
pub use linearized::{
    apply_kernel, assemble_kernel, fundamental_profiles, kernel_test_function, solve_correction,
    solve_directional, solve_fundamental, solve_kernel, KernelPath,
};
pub use path::{DensityPath, TimeMesh};
pub use scenario::{catalog, example21_moments, Example21Moments, Scenario, ScenarioSpec};
pub use sde::{
    derive_seed, simulate_first_variation, simulate_second_variation, simulate_u, simulate_x,
    simulate_y, u_pairing, KernelEnsemble, NoiseBank, PathEnsemble, ProcessLabel,
};
pub use stats::{fit_loglog_slope, SlopeFit};
pub use value::{
    dv_dmu, dv_dt, dv_dx, eval_v, value_report, Estimate, MuDerivative, MuDerivativeMode,
    TerminalFunctional, ValueReport, ValueSettings,
};
pub use verify::{
    convergence_study, derivative_agreement, ito_residual, martingale_check, master_pde_residual,
    master_pde_residual_with_noise, one_step_terminal_check, terminal_condition_check,
    ConvergenceReport, ConvergenceTarget, ItoReport, MartingaleReport, NestedSettings,
    QuotientSteps, ResidualReport,
};

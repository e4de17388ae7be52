//! Periodic homogenization of the G-equation
//! `u_t = |Du| + ⟨V(x/ε, t/ε), Du⟩`.
//!
//! The crate computes effective Hamiltonians from the cell problem, checks
//! them against closed-form bounds, builds the associated Wulff shapes and
//! compares them with directly propagated microscopic fronts.

pub mod cell_problem;
pub mod effective;
pub mod error;
pub mod fields;
pub mod front_geometry;
pub mod harness;
pub mod hj_kernel;

pub use cell_problem::{
    estimate_longtime, estimate_penalized, solve_penalized, CellSolution, EstimatorConfig,
    HbarEstimate, Method,
};
pub use effective::{
    build_table, lower_bound, EffectiveHamiltonian, EnhancementCertificate, SlowHbarTable, Zhat,
};
pub use error::{Error, Result};
pub use fields::{BuiltinField, Family, FieldDiagnostics, Profile, VelocityField};
pub use front_geometry::{
    area_fraction_trace, hopf_lax, inclusion_deviation, propagate_front, AreaFractionTrace,
    CellMask, FrontState, MacroFunction, WulffShape,
};
pub use harness::{error_rate, run, Experiment, ExperimentConfig, RateReport};
pub use hj_kernel::{evolve, numerical_hamiltonian, step, Boundary, Evolver, GridField, GridSpec};

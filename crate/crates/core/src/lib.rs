//! Valuation of defaultable claims under risk-free and replacement closeout.
//!
//! * [`model`]: dynamics, intensities, closeout functions, claims, BSDE driver
//! * [`simulate`]: seeded Euler and exact-GBM path generation
//! * [`analytic`]: closed-form oracles for the constant-coefficient GBM family
//! * [`mc_linear`]: Monte Carlo estimators for the linear valuations
//! * [`pde1d`]: Crank–Nicolson solver, Picard iteration and bound functions in 1-D

pub mod analytic;
pub mod error;
pub mod mc_linear;
pub mod model;
pub mod pde1d;
pub mod simulate;

pub use error::{ModelError, SolverError};
pub use model::{
    bilateral_driver, bsde_driver, validate_closeout, Claim, CloseoutFunction, CloseoutKind,
    CloseoutReport, CloseoutSide, Coefficient, Dynamics, HazardModel, Payoff, SampleBox,
};
pub use simulate::{PathBatch, Scheme, TimeGrid};

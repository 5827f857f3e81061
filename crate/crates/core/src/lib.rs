//! Multirate PDE (MPDE) simulation of nonlinear circuits with pulsed
//! excitation.
//!
//! The fast switching period is resolved by a Galerkin expansion in
//! orthonormal piecewise-polynomial PWM basis functions, while the slowly
//! varying envelope is integrated by an adaptive Radau IIA scheme. A
//! conventional transient solver provides reference solutions, and the
//! [`analysis`] module compares both on accuracy and wall-clock time.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod basis;
pub mod circuit;
pub mod error;
pub mod galerkin;
pub mod integrate;
pub mod quadrature;
pub mod simulation;

pub use analysis::{
    error_report, frequency_sweep, matched_accuracy_speedup, relative_l2_error, ErrorReport,
    MatchedAccuracy, SweepOptions, SweepReport, SweepRow,
};
pub use basis::{inner_product, GalerkinMatrices, PiecewisePolynomial, PwmBasis};
pub use circuit::{BuckConverter, BuckParameters, CircuitModel, LinearCircuit, SaturationCurve};
pub use error::{Error, Result};
pub use galerkin::{
    envelope, reconstruct, CoefficientLayout, GalerkinMode, MpdeSystem, QuadratureSpec, RippleInit,
};
pub use integrate::{
    integrate, ImplicitSystem, IntegrationError, IntegratorConfig, Segment, Trajectory,
};
pub use simulation::{
    simulate_mpde, simulate_reference, solve, solve_mpde, solve_reference, SimulationSpec,
    SolutionRecord, SolveMode,
};

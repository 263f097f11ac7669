//! Generalized multi-type Wright-Fisher processes driven by replicator
//! mean-field dynamics.
//!
//! The deterministic layers ([`simplex`], [`fitness`], [`meanfield`]) are
//! generic over the floating-point type through [`Scalar`]; the stochastic
//! layers ([`chain`], [`gaussian`], [`deviation`], [`extinction`]) work in
//! `f64`.

// `!(x > 0.0)` is the NaN-rejecting form of the check, kept on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod config;
pub mod deviation;
pub mod error;
pub mod extinction;
pub mod fitness;
pub mod gaussian;
pub mod linalg;
pub mod meanfield;
pub mod rng;
pub mod scalar;
pub mod simplex;

pub use error::{Result, WfError};
pub use fitness::{FitnessModel, MutationMatrix, PayoffMatrix, UpdateRule};
pub use meanfield::{MeanFieldReport, Orbit};
pub use scalar::Scalar;
pub use simplex::{LatticePoint, SimplexPoint, SupportSet};

pub type SimplexPointF32 = SimplexPoint<f32>;
pub type SimplexPointF64 = SimplexPoint<f64>;
pub type PayoffMatrixF32 = PayoffMatrix<f32>;
pub type PayoffMatrixF64 = PayoffMatrix<f64>;
pub type UpdateRuleF32 = UpdateRule<f32>;
pub type UpdateRuleF64 = UpdateRule<f64>;
pub type OrbitF64 = Orbit<f64>;

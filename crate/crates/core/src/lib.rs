//! Finite-volume discretizations of the LWR traffic-flow model and
//! least-squares identification of its flux parameter.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: uniform space-time grids, density matrices, multilevel
//!   subdivision and the averaging (restriction) operator.
//! - [`schemes`]: the quadratic flux, the TRM / Godunov / Lax-Friedrichs
//!   numerical fluxes, interface control fields and one-step maps.
//! - [`rollout`]: the discrete dynamical system driven by data-injected
//!   initial and boundary values.
//! - [`gradients`]: step Jacobians, forward- and back-propagated gradients,
//!   the smoothness regularizer and a finite-difference oracle.
//! - [`estimation`]: logit reparametrization, Polak-Ribiere conjugate
//!   gradient, regularization-weight selection and fundamental diagrams.
//! - [`edie`]: trajectory ingestion and Edie's generalized density / flow.
//! - [`synth`]: synthetic ground truth generation.
//!
//! Data-parallel work (regularization grids, gradient-check lattices,
//! trajectory clipping, multi-resolution discretization) goes through
//! [`Execution`], which uses rayon when the `parallel` feature is enabled
//! and falls back to plain iteration otherwise.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod edie;
pub mod error;
pub mod estimation;
mod exec;
pub mod gradients;
pub mod grid;
pub mod rollout;
pub mod schemes;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::{DensityMatrix, Grid, RoadParams, SubdivisionSpec};
pub use schemes::{ControlField, ParamMode, SchemeKind};

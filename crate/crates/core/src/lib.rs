//! Numerical laboratory for fully nonlinear elliptic path-dependent PDEs.
//!
//! The crate builds the solution of `-G(ω, u, ∂u, ∂²u) = 0` on a convex
//! domain by freezing the path, solving local Dirichlet problems and
//! squeezing the result between upper and lower envelopes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domains;
pub mod error;
pub mod frozen_pde;
pub mod generators;
pub mod lattice;
pub mod paths;
pub mod perron;
pub mod uvm;
pub mod viscosity_audit;

pub use domains::{cascade_times, eps_localized, ConvexDomain, ExitRecord};
pub use error::{LabError, Result};
pub use paths::{de_distance, fit_modulus, ModulusFit, PathJson, PiecewisePath};
pub use generators::{
    check_assumptions, AssumptionReport, Band, ClosureMode, GeneratorSpec, HjbForm, Sense, Source,
};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

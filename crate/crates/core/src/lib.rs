//! Minimum-compliance topology optimization that is robust against a
//! worst-case distribution of local material-stiffness defects.
//!
//! The design loop minimizes `f^T u(rho)` over pseudo-densities while an
//! inner problem places a fixed defect budget where it weakens the part
//! most. The inner problem is smoothed with a log barrier, solved by
//! Newton's method on its KKT system, and differentiated with an adjoint
//! of that same system. The outer loop is MMA.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod app;
pub mod config;
pub mod error;
pub mod fem;
pub mod filter;
pub mod inner;
pub mod io;
pub mod linalg;
pub mod material;
pub mod mma;
pub mod oracle;

pub use error::{Error, Result};

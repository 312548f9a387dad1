//! Exact distributed consensus optimization by the proximal method of
//! multipliers with inexact Newton directions.
//!
//! Two direction solvers share one outer loop: Jacobi overrelaxation on a
//! diagonal splitting of the augmented Hessian (no local Hessian inverses),
//! and the block-diagonal Taylor splitting of ESOM. The crate also carries
//! the network model, test problems, convergence-factor analysis and the
//! cost accounting used to compare the two.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Failed runs carry their partial trace in the error.
#![allow(clippy::result_large_err)]

pub mod analysis;
pub mod cost;
pub mod harness;
pub mod inner;
pub mod network;
pub mod numfmt;
pub mod objectives;
pub mod pmm;

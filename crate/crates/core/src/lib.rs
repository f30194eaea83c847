//! Hyperbolic graph condensation.
//!
//! Shrinks a labelled graph into a small synthetic one whose node features
//! live in the Poincaré ball and whose structure is produced by a
//! hyperbolic hypernetwork. Training matches GNN gradients between the two
//! graphs and aligns the spectral gaps of their lazy random walks. The
//! crate also carries the analysis side: commute times, shortest-path flow
//! distances and walk diagnostics.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adgrad;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fmtutil;
pub mod gnn;
pub mod graphcore;
pub mod hypernet;
pub mod linalg;
pub mod manifold;
pub mod spectral;

pub use error::{HydroError, Result};

//! Weak Galerkin approximation of Steklov eigenvalues
//! `-Δu + u = 0` in Ω, `∂u/∂n = λu` on ∂Ω, with discrete eigenvalues that
//! approach the exact ones from below.
//!
//! Pipeline: [`mesh`] → [`assembly`] (built on the per-cell forms in
//! [`wgcore`]) → [`eigen`]. [`source`] solves the companion boundary-flux
//! problem, [`glb`] the α-stabilized guaranteed-lower-bound variant, and
//! [`harness`] drives convergence studies and the CLI.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod eigen;
pub mod error;
pub mod glb;
pub mod harness;
pub mod mesh;
mod parallel;
pub mod polyquad;
pub mod source;
pub mod sparse;
pub mod wgcore;

pub use error::{Result, WgError};
pub use mesh::{Domain, Mesh, Point};

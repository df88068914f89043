//! Numerical laboratory for optimal transport with twisted costs.
//!
//! The crate solves discrete transport problems exactly, reconstructs the
//! dual potential as a finite max of cost profiles, and then measures the
//! geometry that controls second-order regularity of the transport map:
//! sections of the potential, their affine (John) normalization, covering
//! and engulfing constants, Hessian level sets, and integrability of
//! `|D^2 u|^p` away from a detected singular set.
//!
//! Everything is deterministic: solvers break ties lexicographically,
//! random sampling goes through seeded [`rand_chacha::ChaCha8Rng`], and the
//! optional `parallel` feature only parallelizes order-preserving per-cell
//! maps, so results are identical at any thread count.

pub mod cconvex;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub(crate) mod par;
pub mod regularity;
pub mod transport;

pub use error::{LabError, Result};

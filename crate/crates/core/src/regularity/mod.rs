//! Measurements on solved potentials: discrete Hessians and the
//! section-based estimates built on top of them.

mod boundary;
mod decay;
mod density;
mod engulf;
mod hessian;
mod singular;
mod w2p;

pub use boundary::{boundary_heights, BandRow, BoundaryProfile};
pub use decay::{levelset_decay, LevelRow, LevelSetTable};
pub use density::{section_density_estimate, DensityReport};
pub use engulf::{engulfing_c, engulfing_estimate, EngulfingRow, EngulfingTable};
pub use hessian::{hessian_field, HessianField};
pub use singular::{singular_detect, SingularMask};
pub use w2p::{w2p_norm, W2pReport};

//! Piecewise rigid functions on voxel domains.
//!
//! Sets of finite perimeter are unions of grid cells, so every perimeter and
//! jump area is an exact face count. The constructive estimates (joining,
//! truncation, set decompositions) emit a [`Certificate`] listing every
//! inequality with both sides evaluated on the actual output.

pub mod certificate;
pub mod constructions;
pub mod energies;
pub mod error;
pub mod grid;
pub mod io;
pub mod joining;
pub mod minimize;
pub mod pr;
pub mod rigid;
pub mod truncation;

pub use certificate::{Certificate, Inequality};
pub use error::{Error, Result};

/// Library version, echoed in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

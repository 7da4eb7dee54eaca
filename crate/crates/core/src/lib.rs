//! Class-incremental learning over frozen backbone features.
//!
//! Each task trains its own bottleneck adapter ("expert") and contributes one
//! prototype per class. At test time every expert embeds the sample, experts
//! whose best match falls outside their own classes are filtered out, and the
//! remaining features are blended by confidence before a final
//! nearest-prototype decision.
//!
//! Modules, bottom to top: [`numerics`], [`dataset`], [`expert`],
//! [`prototypes`], [`inference`], [`harness`].

pub mod dataset;
pub mod error;
pub mod expert;
pub mod harness;
pub mod inference;
mod io;
pub mod numerics;
pub mod prototypes;

pub use error::{Error, Result};

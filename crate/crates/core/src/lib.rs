//! Two-head 3D pose network, uncertainty scores, procedural domains and the
//! adaptation trainer.

mod error;
pub mod heatmap;
pub mod model;
pub mod skeleton;
pub mod synthdata;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};

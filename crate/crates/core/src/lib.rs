//! Locality- and interaction-aware adapters around a frozen vision transformer
//! for zero-shot human-object interaction detection, at desk scale.

pub mod category;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod runner;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;

//! LiDAR place recognition framed as classification over grid cells.
//!
//! Scans are labeled by the map cell they were captured in, an encoder is
//! trained with a masked cross-entropy objective over those cells, and the
//! resulting embeddings are evaluated by nearest-neighbor retrieval against a
//! database of training scans.

pub mod annindex;
pub mod error;
pub mod evalkit;
pub mod geogrid;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod seeding;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

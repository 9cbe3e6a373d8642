//! Dual-shot anchor-based face detection, built for verification at desk scale.

pub mod anchors;
pub mod augment;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evalkit;
pub mod fem;
pub mod geometry;
pub mod image;
pub mod matching;
pub mod net;
pub mod pal;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{BBox, BoxDelta, Detection};

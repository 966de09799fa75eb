//! Decompose group gaps in automated text scores into content, style and
//! scorer-tilt components using a panel of style-only rewrites.

pub mod data;
pub mod decomposition;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod report;
pub mod rewrite;
pub mod scorer;
pub mod seeds;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};

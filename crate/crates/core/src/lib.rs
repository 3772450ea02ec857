//! Recurrent heatmap-regression network for 2D human pose estimation.
//!
//! A feed-forward module (three 3×3 conv layers with two poolings, a large
//! kernel conv and a 1×1 conv) feeds a recurrent fusion module whose
//! large-kernel + 1×1 pair is re-run with shared weights on the
//! concatenation of fixed Layer-3 features and its own previous output.
//! Every pass ends in a heatmap head; all heads are supervised.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod supervision;
pub mod train;
pub mod util;

pub use error::{Error, Result};

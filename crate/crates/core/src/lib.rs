//! Adaptive size-prior pathway for monocular 3D detection: a prototype bank
//! of object sizes, class-gated attention over it, prior injection into the
//! size head, and a distributional alignment penalty.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bank;
pub mod cap;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kitti_io;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod routing;
pub mod size_space;
pub mod sizepath;
pub mod toy;

pub use error::{PrioError, Result};

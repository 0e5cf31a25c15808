//! Patch-neighbourhood memory attention for tiled-image segmentation.
//!
//! A slide is cut into a grid of patches. Every epoch each patch is encoded
//! once without gradients and its compressed embedding is written into a
//! padded spatial [`grid::MemoryBank`]. During the gradient-carrying pass a
//! patch queries its `(2k+1)^2` neighbourhood from the bank with masked
//! multi-head attention ([`attn`]), and the resulting context vector is fused
//! into the bottleneck of a small encoder-decoder ([`segnet`]).

pub mod attn;
pub mod attviz;
pub mod error;
pub mod fuse;
pub mod grid;
mod io;
pub mod metrics;
pub mod ndiff;
pub mod segnet;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

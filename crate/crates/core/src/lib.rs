//! Deep multi-order context-aware kernel networks for multi-label
//! classification of grid-structured images.
//!
//! Images arrive as grids of cell features. Each network layer is one step
//! of a context-aware kernel iteration: every cell is stacked with its
//! directional neighbors (and with attention-filtered walks of higher
//! order), then projected per cell. Pooled embeddings feed one linear head
//! per group of co-occurring labels.

pub mod autodiff;
pub mod config;
pub mod dataio;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod multiorder;
pub mod network;
pub mod training;

pub use error::{Error, Result};

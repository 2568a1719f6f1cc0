//! Graph-convolutional cross-modal retrieval.
//!
//! Text is a bag of words laid out on a k-nearest-neighbor word graph and
//! embedded by two Chebyshev graph convolutions; images are precomputed
//! feature vectors mapped by a dense layer. Both land in a common space
//! where a learned scorer rates text-image pairs.

pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod numfmt;
pub mod pipeline;
pub mod spectral;
pub mod text_graph;
pub mod trainer;

pub use error::{GinError, Result};

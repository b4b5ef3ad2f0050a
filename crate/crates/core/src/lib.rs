//! Equivalence-class exploration for small transformer-style networks.
//!
//! A network `𝒩 = Λ_n ∘ … ∘ Λ_1` induces on each of its intermediate spaces
//! the pullback of the output metric, `g = Jᵀ G J`. The metric is singular:
//! its null directions move the input without changing the output, its
//! range directions change the output fastest. This crate
//!
//! - evaluates networks and their exact Jacobians ([`netcore`]),
//! - builds and decomposes pullback metrics and measures curves under them
//!   ([`geometry`]),
//! - walks along null directions to trace an equivalence class, or along
//!   range directions to leave it ([`explore`]),
//! - scores input segments by their block of the metric ([`attribution`]),
//! - maps explored embeddings back to images ([`interpret`]),
//! - and provides the data, training and file plumbing around all of that
//!   ([`workbench`]).

pub mod attribution;
pub mod error;
pub mod explore;
pub mod fsio;
pub mod geometry;
pub mod interpret;
pub mod linalg;
pub mod netcore;
pub mod raster;
pub mod rng;
pub mod workbench;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use netcore::{LayerSpec, Network, VitConfig};

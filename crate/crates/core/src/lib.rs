//! Prior-conditioned feature enhancement for underwater imagery.
//!
//! A frozen water-type classifier supplies a water-type prior and a
//! degradation prior; together with the enhancement network's own features
//! they form the query of a sigmoid-gated attention that follows a
//! multi-scale, full-scale-aligned feature extractor. The enhancement network
//! adds its output to the input image, so it can be placed in front of any
//! image-consuming task network.
//!
//! The crate is `no_std` (with `alloc`); enable the `std` feature for faster
//! platform math.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod error;
pub mod fen;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod msfa;
pub mod nn;
pub mod optim;
pub mod params;
pub mod priorgen;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod watersim;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::{clamp_image, FeatureMap, ImageTensor};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

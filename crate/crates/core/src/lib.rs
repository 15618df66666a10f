//! Modular time-series forecasting pipelines assembled from interchangeable
//! stages (input transform, embedding, encoder, decoder, output transform),
//! together with a stratified paired Monte Carlo protocol that attributes
//! mean performance, stability and peak potential to individual components.

pub mod datasets;
pub mod decoder;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod layers;
pub mod numcore;
pub mod pipeline;
pub mod protocol;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamStore, Rng, Tensor, Var};

//! From-scratch virtual try-on engine: hand-written tensor operators with
//! verified gradients, thin-plate-spline garment warping, region-aware
//! normalization, and small adversarially trained networks, all deterministic
//! for a given seed.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod element;
pub mod error;
pub mod imageio;
pub mod label;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod param;
pub mod person;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tps;
pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;

//! Separation of fish vocalizations from sea background noise.

pub mod audio;
pub mod bsseval;
pub mod demucs;
pub mod fsio;
pub mod mixgen;
pub mod model;
pub mod tasnet;
pub mod train;

pub use model::{Model, ModelError, Separator};

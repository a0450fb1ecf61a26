//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Provides exactly what the waveform separators need: strided/dilated/grouped 1D
//! convolution, transposed convolution, ReLU/PReLU/sigmoid/GLU, layer normalization,
//! bidirectional LSTM and a per-step linear layer, plus a checkpoint container.

pub mod checkpoint;
mod compute;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, DType};
pub use compute::{Compute, Eager};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{ConvOpts, NormKind};
pub use params::{uniform_fan_in, ParamId, ParamStore};
pub use tensor::Tensor;

/// Seeded generator used for parameter initialization.
pub fn init_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

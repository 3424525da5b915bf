//! Minimal dense tensor kernel for the fbpose networks: the layer set
//! (convolution, strided convolution, dense, max pooling, zero-fill
//! unpooling, dropout, activations), reverse-mode gradients through
//! sequential chains, ADAM, and the `FBPOSE-W1` weights container.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use io::WeightsContainer;
pub use layer::{Activation, Architecture, LayerSpec};
pub use network::{Gradients, Mode, Network, Trace};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use rand_chacha::ChaCha8Rng;

//! A small double-precision neural-network kernel: dense, 3x3 valid
//! convolution, 2x2 max-pool, ReLU and flatten layers with exact reverse-mode
//! gradients, a MAPE loss, an Adam optimizer, and finite-difference checks.

mod layer;
mod loss;
mod network;
mod optim;
mod tensor;

pub use layer::{layer_backward, layer_forward, Layer, LayerCache, LayerParams, LayerSpec};
pub use loss::mape_loss;
pub use network::{
    gradient_check, gradient_check_with, Branch, Gradients, Network, NetworkCache, TailCache,
};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::Tensor;

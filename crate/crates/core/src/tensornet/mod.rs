//! Small dense-tensor CNN engine: a fixed layer vocabulary, reverse-mode
//! gradients, Adam, and a binary checkpoint format.

mod adam;
mod checkpoint;
mod gemm;
mod network;
mod spec;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{Gradients, Network};
pub use spec::{default_embed_net, default_regression_net, ActShape, Layer, NetworkSpec};
pub use tensor::Tensor;

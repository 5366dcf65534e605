//! Minimal neural core: dense tensors, a reverse-mode tape, typed GNN layers,
//! an MLP head, weighted BCE and Adam.

mod adam;
mod gradcheck;
mod layers;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use layers::{EdgeIndex, GnnLayer, LayerKind, Mlp, ParamStore, GAT_NEGATIVE_SLOPE};
pub use tape::{bce_grad, bce_loss, bce_value, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

//! Dense `f64` tensors, a reverse-mode tape, and the layers built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use layers::{
    attention, linear, mean_pool, mlp2, Activation, LayerNorm, Linear, Mlp2, MultiHeadAttention,
};
pub use optim::{Sgd, SgdConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

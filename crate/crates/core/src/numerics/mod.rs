//! Dense tensors, reverse-mode differentiation, optimisation and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{sigmoid, Activation, Gradients, Graph, Var};
pub use layers::{kaiming_uniform, BatchNorm, Linear, Mlp, Mode};
pub use optim::{adam_update, cosine_lr, Adam, AdamConfig, LrSchedule};
pub use params::ParamStore;
pub use tensor::Tensor;

//! Dense tensors, a reverse-mode tape, parameter storage and the optimizer.

mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{Grads, Graph, Mode, Var};
pub use optim::{fill_missing_grads, AdamW};
pub use params::{normal, xavier_uniform, Gradients, Param, ParamId, ParamStore};
pub use rng::{RngSnapshot, RngState};
pub use tensor::Tensor;

//! Dense tensors with dynamic-graph reverse-mode differentiation.
//!
//! A [`Graph`] records primitives (`matmul`, `softmax`, `layer_norm`, ...)
//! as they execute and [`Graph::backward`] replays them in reverse.
//! Trainable state lives in a [`ParamGroup`], which is bound into a fresh
//! graph for every step and updated with [`adam_step`].

mod element;
mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod strided;
mod tensor;

pub use element::{DType, Element};
pub use error::{DiffError, Result};
pub use gradcheck::{check_gradients, GradCheckReport, FD_EPS, REL_FLOOR};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{adam_step, cosine_lr, AdamState, CosineSchedule};
pub use params::{ParamGroup, ParamVars};
pub use tensor::DTensor;

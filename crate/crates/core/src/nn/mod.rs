//! Dense tensors, a small reverse-mode tape, attention, dropout and
//! optimizers.

pub mod attention;
pub mod dropout;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::{attention, multi_head_attention};
pub use dropout::{multi_sample_dropout, Affine, Mode};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttnMask, Graph, NodeId};
pub use optim::{fgm_perturb, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tensor::{log_softmax, sigmoid, softmax, Tensor};

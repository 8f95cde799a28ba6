//! Minimal differentiable compute core: dense tensors, a reverse-mode tape,
//! transformer building blocks, AdamW and the cosine learning-rate schedule.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod mask;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{Gradients, Graph, Var, BLOCKED_LOGIT};
pub use layers::{masked_self_attention, Ctx, Init, LayerNorm, Linear, SelfAttention, TransformerBlock};
pub use mask::AttentionMask;
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, LRSchedule, OptimizerState};
pub use params::{ParamId, ParameterSet};
pub use tensor::{Scalar, Tensor};

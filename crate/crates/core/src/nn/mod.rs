//! Minimal differentiable substrate: tensors, layers with hand-written
//! backward passes, AdamW and finite-difference gradient checks.

pub mod activation;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod mlp;
pub mod norm;
pub mod optim;
pub mod param;
pub mod softmax;
pub mod tensor;

pub use attention::{attend, attend_backward, AttentionWeights};
pub use checkpoint::{Checkpoint, ValueWidth};
pub use gradcheck::{finite_diff_gradcheck, GradcheckConfig, GradcheckReport};
pub use linear::Linear;
pub use mlp::{MlpCache, MlpSiLU};
pub use norm::{LayerNorm, LayerNormCache};
pub use optim::{AdamWConfig, OptimizerState};
pub use param::{Module, Parameter};
pub use softmax::softmax_rows;
pub use tensor::Tensor;

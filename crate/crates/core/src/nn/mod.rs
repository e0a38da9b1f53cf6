//! Minimal differentiable tensor engine: layers, losses, optimizers and the
//! learning-rate schedule used by the segmentation and adaptation code.

pub mod activation;
pub mod conv;
mod element;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod optim;
mod param;
pub mod pool;
pub mod reduce;
mod tape;
mod tensor;

pub use activation::{leaky_relu, pointwise, relu, softmax, Activation};
pub use conv::conv2d;
pub use element::Real;
pub use loss::{bce_logits_loss, mse_loss, softmax_ce_loss};
pub use norm::{batch_norm2d, RunningStats};
pub use optim::{poly_lr, OptKind, OptState};
pub use param::{ema_update, ema_update_trainable, Bound, Param, ParamKind, ParamSet};
pub use pool::{concat, pool2d, upsample2d, PoolMode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{IntTensor, Tensor};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

//! Minimal differentiable compute: dense matrices, feed-forward networks
//! with a backprop tape, losses, SGD, learning-rate schedules, finite
//! difference checking, and JSON checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod network;
pub mod optim;
pub mod schedule;

pub use checkpoint::{Checkpoint, EncoderSection, NetworkState};
pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use loss::{infonce_loss, offset_loss, weighted_cross_entropy, ContrastiveOutput, LossOutput};
pub use matrix::{dot, norm, Matrix};
pub use network::{mlp_specs, Layer, LayerSpec, Network, ParamTensor};
pub use optim::{Sgd, SgdConfig};
pub use schedule::LrSchedule;

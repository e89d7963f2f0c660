//! Neural predictors: an embedding MLP and a dilated 1D CNN, trained with
//! AdamW, plus finite-difference gradient verification.

pub mod cnn;
mod gradcheck;
mod init;
pub mod mlp;
mod train;

pub use cnn::{cnn1d_fit, Cnn1d, CnnConfig, KERNEL};
pub use gradcheck::{
    grad_check_cnn, grad_check_mlp, max_rel_grad_error, sample_indices, GRAD_CHECK_EPS,
};
pub use mlp::{mlp_fit, DropoutMasks, Mlp, MlpConfig, MlpMode};
pub use train::{
    make_batches, AdamW, EarlyStopper, TrainTrace, ADAMW_BETA1, ADAMW_BETA2, ADAMW_EPS,
    ADAMW_WEIGHT_DECAY,
};

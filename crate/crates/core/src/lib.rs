//! Prediction of IgG→scFv reformatting outcomes from multimodal antibody features.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`dataset`] — record parsing, signature aggregation, label derivation
//! * [`splits`] — the three deployment-motivated partitioning schemes
//! * [`seq`], [`structure`], [`bio`] — per-modality feature construction
//! * [`fusion`] — design-matrix assembly with ablation masks and scaling
//! * [`linear`], [`neural`] — regularized linear models, MLP and dilated 1D CNN
//! * [`eval`] — ranking/correlation metrics, fold aggregation, ablations
//! * [`tuning`] — grid and seeded random hyperparameter search
//! * [`synth`] — synthetic benchmark generator with planted ground truth
//! * [`pipeline`] — stage orchestration and on-disk artifact formats

pub mod bio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linear;
pub mod neural;
pub mod pipeline;
pub mod seq;
pub mod splits;
pub mod structure;
pub mod synth;
pub mod tuning;

pub use error::{CoreError, Result};

use serde::{Deserialize, Serialize};

/// Prediction task kind shared by the linear and neural model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classify,
    Regress,
}

impl Task {
    pub fn is_classify(self) -> bool {
        matches!(self, Task::Classify)
    }
}

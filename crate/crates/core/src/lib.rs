//! Continuous refinement of segmentation masks.

pub mod cam;
pub mod data;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod inference;
pub mod metrics;
pub mod training;
mod error;

pub use cam::{AlignedQuerySet, CoordGrid, PositionInfo};
pub use decoder::{CrmModel, MlpConfig, RefineMode};
pub use diffcore::{OptimizerState, Tensor};
pub use encoder::{EncoderConfig, LatentFeature};
pub use inference::RefinementSchedule;
pub use metrics::EvalReport;
pub use training::{Checkpoint, TrainConfig};
pub use error::{CrmError, Result};

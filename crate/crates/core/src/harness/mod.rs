//! Synthetic data, oracle features, toy training and the registration and
//! evaluation drivers used by the command-line tool.

pub mod config;
pub mod oracle;
pub mod pipeline;
pub mod scene;
pub mod train;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::geometry::io::FormatError;
use crate::geometry::GeometryError;
use crate::kv::KvError;
use crate::loss::LossError;
use crate::matcher::MatchError;
use crate::pnp::PnpError;

pub use config::{OracleConfig, RunConfig, SceneConfig, TrainConfig};
pub use oracle::oracle_descriptors;
pub use pipeline::{density_ablation, eval_dataset, register, FeatureSource, PairRecord, Registration};
pub use scene::{generate_scene, read_scene, write_scene, CellTruth, SyntheticScene};
pub use train::{train_toy, LossRecord, TrainOutcome, TrainingScene};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {0}")]
    Kv(#[from] KvError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("data: {0}")]
    Data(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("overlap detection: {0}")]
    Overlap(EncoderError),
    #[error("matching: {0}")]
    Matching(#[from] MatchError),
    #[error("pose estimation: {0}")]
    Pose(#[from] PnpError),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("non-finite loss at step {step}, scene {scene}: desc={desc} det={det}")]
    NonFiniteLoss { step: usize, scene: usize, desc: f64, det: f64 },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl HarnessError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Kv(_) | HarnessError::Config(_) => 2,
            HarnessError::Encoder(EncoderError::Config(_)) => 2,
            HarnessError::Loss(LossError::InvalidConfig(_)) => 2,
            HarnessError::Pose(PnpError::InvalidConfig(_)) => 2,
            HarnessError::Format(_)
            | HarnessError::Data(_)
            | HarnessError::Geometry(_)
            | HarnessError::Encoder(_)
            | HarnessError::Overlap(_)
            | HarnessError::Matching(_)
            | HarnessError::Loss(LossError::InsufficientSamples { .. }) => 3,
            HarnessError::Pose(_)
            | HarnessError::Loss(_)
            | HarnessError::NonFiniteLoss { .. }
            | HarnessError::GradCheck(_) => 4,
        }
    }
}

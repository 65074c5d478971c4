//! Synthetic paired data, the two-stage training schedule, checkpoints,
//! retrieval evaluation and the masked-view similarity probe.

mod checkpoint;
mod dataset;
mod eval;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{
    generate_dataset, read_clip, write_clip, Color, Dataset, Latent, ManifestRecord, Motion, Pattern, Sample,
    SyntheticDatasetSpec, CLIP_HEADER_LEN,
};
pub use eval::{embed_pairs, evaluate, similarity_probe, ClipTrend, EvalReport, ProbeConfig, ProbeReport};
pub use optim::{AdamConfig, AdamState, StepDecay};
pub use train::{
    eval_frames, initial_checkpoint, resume, train, train_frames, train_with_log, EpochLog, MaskModality, Stage,
    TrainConfig, TrainOutcome,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;
use crate::encoders::{EncError, EncoderConfig};
use crate::objective::{ContrastiveConfig, ObjError};
use crate::textpipe::TextError;
use crate::vidpipe::VidError;

/// Parameter holding the learnable log-temperature.
pub const LOG_TAU: &str = "objective.log_tau";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint entry `{name}`: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint entry `{0}` is missing")]
    MissingEntry(String),
    #[error("checkpoint entry `{name}`: {detail}")]
    Entry { name: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, step {step}; last good state kept from epoch {}", .last_good.epoch)]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Encoder(#[from] EncError),
    #[error(transparent)]
    Video(#[from] VidError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Objective(#[from] ObjError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl TrainError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when a non-finite value stopped a computation inside the model.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Self::Diff(DiffError::NonFinite { .. }) | Self::Encoder(EncError::Diff(DiffError::NonFinite { .. }))
        )
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
}

impl SessionConfig {
    /// Desk-scale encoder with the default schedule; `vocab_size` 0 is
    /// resolved from the training captions.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(0),
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

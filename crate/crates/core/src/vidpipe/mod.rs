//! Video side of the input pipeline: clips, patch tokens, mask plans and
//! the embed-then-gather step that drops masked patches before encoding.

mod clip;
mod embed;
mod mask;
mod patch;

pub use clip::{image_as_clip, VideoClip, CHANNELS};
pub use embed::{embed_and_gather, PatchEmbedding, PositionalTables, VisibleTokens};
pub use mask::{masked_count, sample_mask, MaskPlan, MaskStrategy};
pub use patch::{patchify, PatchSet};

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum VidError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("mask ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("mask ratio {ratio} leaves no visible patch out of {patches} per frame")]
    DegeneratePlan { ratio: f64, patches: usize },
    #[error("mask plan covers {plan_frames}x{plan_patches} tokens, patch set has {frames}x{patches}")]
    PlanMismatch {
        plan_frames: usize,
        plan_patches: usize,
        frames: usize,
        patches: usize,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

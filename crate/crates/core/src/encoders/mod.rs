//! Dual-stream encoders: a divided space-time video transformer that only
//! sees visible patches, a text transformer, and linear heads into a shared
//! unit-norm embedding space.

mod layers;
mod text;
mod video;

pub use layers::{Linear, Mlp, Norm, SelfAttention};
pub use text::{TextBlock, TextEncoder};
pub use video::{DividedLayouts, VideoBlock, VideoEncoder};

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, ParamLayout, ParamStore, Real, Tape, Var};
use crate::textpipe::TextSequence;
use crate::vidpipe::{embed_and_gather, MaskPlan, PatchSet, VidError};

#[derive(Debug, thiserror::Error)]
pub enum EncError {
    #[error("encoder configuration: {0}")]
    Config(String),
    #[error("video input has no visible token")]
    EmptyInput,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Video(#[from] VidError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Video blocks.
    pub depth: usize,
    /// Video model width D.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch side P in pixels.
    pub patch: usize,
    /// Square frame side after preprocessing.
    pub frame_size: usize,
    pub max_frames: usize,
    pub text_depth: usize,
    pub text_width: usize,
    pub text_heads: usize,
    /// L_max, including `[CLS]`.
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Shared embedding width.
    pub projection: usize,
}

impl EncoderConfig {
    /// Small configuration that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            frame_size: 32,
            max_frames: 4,
            text_depth: 2,
            text_width: 64,
            text_heads: 4,
            max_text_len: 16,
            vocab_size,
            projection: 32,
        }
    }

    /// ViT-B/16 video tower with a DistilBERT-sized text tower.
    pub fn paper() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            frame_size: 224,
            max_frames: 4,
            text_depth: 6,
            text_width: 768,
            text_heads: 12,
            max_text_len: 128,
            vocab_size: 30522,
            projection: 256,
        }
    }

    /// N_max = (frame_size / P)².
    pub fn max_patches(&self) -> usize {
        let side = self.frame_size / self.patch.max(1);
        side * side
    }

    pub fn validate(&self) -> Result<(), EncError> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("frame_size", self.frame_size),
            ("max_frames", self.max_frames),
            ("text_width", self.text_width),
            ("text_heads", self.text_heads),
            ("projection", self.projection),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncError::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(EncError::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.text_width.is_multiple_of(self.text_heads) {
            return Err(EncError::Config(format!(
                "text_width {} not divisible by text_heads {}",
                self.text_width, self.text_heads
            )));
        }
        if !self.frame_size.is_multiple_of(self.patch) {
            return Err(EncError::Config(format!(
                "frame_size {} not divisible by patch {}",
                self.frame_size, self.patch
            )));
        }
        if self.max_text_len < 2 {
            return Err(EncError::Config("max_text_len must be at least 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(EncError::Config(
                "vocab_size must cover the four reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter handles of the full dual encoder.
#[derive(Debug, Clone)]
pub struct MacModel {
    pub config: EncoderConfig,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub video_head: Linear,
    pub text_head: Linear,
    layout: ParamLayout,
}

impl MacModel {
    pub fn new(config: EncoderConfig) -> Result<Self, EncError> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let video = VideoEncoder::register(&mut layout, &config);
        let text = TextEncoder::register(&mut layout, &config);
        let video_head = Linear::register(&mut layout, "head.video", config.width, config.projection);
        let text_head = Linear::register(&mut layout, "head.text", config.text_width, config.projection);
        Ok(Self {
            config,
            video,
            text,
            video_head,
            text_head,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Total scalar parameters of both encoders and heads.
    pub fn param_count(&self) -> usize {
        self.layout.numel()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.layout
            .specs()
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.numel())
            .sum()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>, EncError> {
        Ok(ParamStore::init(self.layout.specs(), seed)?)
    }

    /// Pre-projection video `[CLS]` for the visible part of `patches`.
    pub fn video_cls<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: &PatchSet,
        plan: &MaskPlan,
    ) -> Result<Var, EncError> {
        if patches.patch() != self.config.patch {
            return Err(EncError::Config(format!(
                "patch size {} differs from configured {}",
                patches.patch(),
                self.config.patch
            )));
        }
        let tokens = embed_and_gather(tape, store, &self.video.embedding, patches, plan)?;
        self.video.forward(tape, store, &tokens)
    }

    pub fn text_cls<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &TextSequence,
    ) -> Result<Var, EncError> {
        self.text.forward(tape, store, seq)
    }

    /// Linear head followed by L2 normalization.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        head: &Linear,
        cls: Var,
    ) -> Result<Var, EncError> {
        let z = head.forward(tape, store, cls)?;
        Ok(tape.l2_normalize(z)?)
    }

    /// Unit-norm video embedding (`1 × projection`).
    pub fn embed_video<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: &PatchSet,
        plan: &MaskPlan,
    ) -> Result<Var, EncError> {
        let cls = self.video_cls(tape, store, patches, plan)?;
        self.project(tape, store, &self.video_head, cls)
    }

    /// Unit-norm text embedding (`1 × projection`).
    pub fn embed_text<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &TextSequence,
    ) -> Result<Var, EncError> {
        let cls = self.text_cls(tape, store, seq)?;
        self.project(tape, store, &self.text_head, cls)
    }
}

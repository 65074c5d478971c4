use std::sync::Arc;

use crate::diffcore::{AttentionLayout, ParamId, ParamInit, ParamLayout, ParamStore, Real, Tape, Var};
use crate::vidpipe::{PatchEmbedding, VisibleTokens, CHANNELS};

use super::layers::{residual, Mlp, Norm, SelfAttention, WEIGHT_STD};
use super::{EncError, EncoderConfig};

/// One divided space-time block: temporal attention, spatial attention, MLP.
#[derive(Debug, Clone)]
pub struct VideoBlock {
    pub temporal_norm: Norm,
    pub temporal: SelfAttention,
    pub spatial_norm: Norm,
    pub spatial: SelfAttention,
    pub mlp_norm: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub embedding: PatchEmbedding,
    pub cls: ParamId,
    pub blocks: Vec<VideoBlock>,
    pub norm: Norm,
}

/// Attention groups for one forward pass over `[CLS] + visible tokens`.
#[derive(Debug, Clone)]
pub struct DividedLayouts {
    /// Tokens sharing a spatial index; `None` when the clip has one frame.
    pub temporal: Option<Arc<AttentionLayout>>,
    /// Tokens sharing a frame.
    pub spatial: Arc<AttentionLayout>,
}

impl DividedLayouts {
    pub fn new(tokens: &VisibleTokens) -> Result<Self, EncError> {
        if tokens.is_empty() {
            return Err(EncError::EmptyInput);
        }
        let first = tokens.frame_index[0];
        let multi_frame = tokens.frame_index.iter().any(|&f| f != first);
        let temporal = if multi_frame {
            Some(Arc::new(AttentionLayout::grouped_with_global(&tokens.spatial_index)?))
        } else {
            None
        };
        Ok(Self {
            temporal,
            spatial: Arc::new(AttentionLayout::grouped_with_global(&tokens.frame_index)?),
        })
    }
}

impl VideoBlock {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layouts: &DividedLayouts,
    ) -> Result<Var, EncError> {
        let mut x = x;
        if let Some(temporal) = &layouts.temporal {
            x = residual(tape, store, x, &self.temporal_norm, |t, h| {
                self.temporal.forward(t, store, h, Arc::clone(temporal))
            })?;
        }
        let x = residual(tape, store, x, &self.spatial_norm, |t, h| {
            self.spatial.forward(t, store, h, Arc::clone(&layouts.spatial))
        })?;
        residual(tape, store, x, &self.mlp_norm, |t, h| self.mlp.forward(t, store, h))
    }
}

impl VideoEncoder {
    pub(crate) fn register(layout: &mut ParamLayout, cfg: &EncoderConfig) -> Self {
        let d = cfg.width;
        let embedding = PatchEmbedding::register(
            layout,
            "video",
            cfg.patch * cfg.patch * CHANNELS,
            d,
            cfg.max_patches(),
            cfg.max_frames,
        );
        let cls = layout.add("video.cls", &[1, d], ParamInit::TruncNormal { std: WEIGHT_STD });
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("video.block{i}");
                VideoBlock {
                    temporal_norm: Norm::register(layout, &format!("{p}.temporal_norm"), d),
                    temporal: SelfAttention::register(layout, &format!("{p}.temporal"), d, cfg.heads),
                    spatial_norm: Norm::register(layout, &format!("{p}.spatial_norm"), d),
                    spatial: SelfAttention::register(layout, &format!("{p}.spatial"), d, cfg.heads),
                    mlp_norm: Norm::register(layout, &format!("{p}.mlp_norm"), d),
                    mlp: Mlp::register(layout, &format!("{p}.mlp"), d, d * cfg.mlp_ratio),
                }
            })
            .collect();
        let norm = Norm::register(layout, "video.norm", d);
        Self {
            embedding,
            cls,
            blocks,
            norm,
        }
    }

    /// Runs the blocks over `[CLS]` followed by the visible tokens and
    /// returns the final-norm `[CLS]` row (`1 × D`).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &VisibleTokens,
    ) -> Result<Var, EncError> {
        let layouts = DividedLayouts::new(tokens)?;
        let cls = tape.param(store, self.cls)?;
        let mut x = tape.concat_rows(&[cls, tokens.embeddings])?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, &layouts)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        Ok(tape.slice_rows(x, 0, 1)?)
    }
}

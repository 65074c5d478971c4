use std::sync::Arc;

use crate::diffcore::{AttentionLayout, ParamId, ParamInit, ParamLayout, ParamStore, Real, Tape, Var};
use crate::textpipe::TextSequence;

use super::layers::{residual, Mlp, Norm, SelfAttention, WEIGHT_STD};
use super::{EncError, EncoderConfig};

#[derive(Debug, Clone)]
pub struct TextBlock {
    pub attention_norm: Norm,
    pub attention: SelfAttention,
    pub mlp_norm: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TextBlock>,
    pub norm: Norm,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub(crate) fn register(layout: &mut ParamLayout, cfg: &EncoderConfig) -> Self {
        let d = cfg.text_width;
        let init = ParamInit::TruncNormal { std: WEIGHT_STD };
        let tokens = layout.add("text.tokens", &[cfg.vocab_size, d], init.clone());
        let positions = layout.add("text.positions", &[cfg.max_text_len, d], init);
        let blocks = (0..cfg.text_depth)
            .map(|i| {
                let p = format!("text.block{i}");
                TextBlock {
                    attention_norm: Norm::register(layout, &format!("{p}.attention_norm"), d),
                    attention: SelfAttention::register(layout, &format!("{p}.attention"), d, cfg.text_heads),
                    mlp_norm: Norm::register(layout, &format!("{p}.mlp_norm"), d),
                    mlp: Mlp::register(layout, &format!("{p}.mlp"), d, d * cfg.mlp_ratio),
                }
            })
            .collect();
        Self {
            tokens,
            positions,
            blocks,
            norm: Norm::register(layout, "text.norm", d),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_text_len,
        }
    }

    /// Pre-norm transformer over the whole padded sequence; padded key slots
    /// are biased out. Returns the final-norm `[CLS]` row (`1 × D`).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &TextSequence,
    ) -> Result<Var, EncError> {
        let rows = seq.ids.len();
        if rows == 0 || rows > self.max_len || seq.length == 0 || seq.length > rows {
            return Err(EncError::Config(format!(
                "sequence of {rows} ids ({} live) does not fit {} positions",
                seq.length, self.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(EncError::Config(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..rows).collect();
        let table = tape.param(store, self.tokens)?;
        let pos = tape.param(store, self.positions)?;
        let tok = tape.gather_rows(table, &ids)?;
        let pos = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let layout = Arc::new(AttentionLayout::full(rows, seq.length)?);
        for block in &self.blocks {
            x = residual(tape, store, x, &block.attention_norm, |t, h| {
                block.attention.forward(t, store, h, Arc::clone(&layout))
            })?;
            x = residual(tape, store, x, &block.mlp_norm, |t, h| block.mlp.forward(t, store, h))?;
        }
        let x = self.norm.forward(tape, store, x)?;
        Ok(tape.slice_rows(x, 0, 1)?)
    }
}

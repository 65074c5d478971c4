use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::encoders::EncoderConfig;
use crate::vidpipe::CHANNELS;

/// FLOPs charged per element for layer norm, softmax and GELU.
pub const NONLINEAR_FLOPS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkCost {
    pub params: u64,
    pub flops: f64,
}

/// Analytic forward cost of one video-text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub frames: usize,
    pub patches_per_frame: usize,
    pub visible_per_frame: usize,
    pub text_len: usize,
    pub video: SubnetworkCost,
    pub text: SubnetworkCost,
    pub heads: SubnetworkCost,
    pub total_params: u64,
    pub total_flops: f64,
}

impl FlopsReport {
    pub fn total_gflops(&self) -> f64 {
        self.total_flops / 1e9
    }

    pub fn total_mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

fn linear_params(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

/// `rows × (i → o)` dense layer with bias.
fn linear_flops(rows: f64, i: usize, o: usize) -> f64 {
    rows * (2.0 * i as f64 * o as f64 + o as f64)
}

/// Q, K, V and output projections for `rows` rows of width `d`.
fn projection_flops(rows: f64, d: usize) -> f64 {
    4.0 * linear_flops(rows, d, d)
}

/// Scores, softmax and weighted sum for `pairs` query-key pairs.
fn attention_core_flops(pairs: f64, d: usize, heads: usize) -> f64 {
    pairs * (4.0 * d as f64 + NONLINEAR_FLOPS * heads as f64)
}

/// Layer norm plus residual add around a sub-layer.
fn norm_residual_flops(rows: f64, d: usize) -> f64 {
    rows * d as f64 * (NONLINEAR_FLOPS + 1.0)
}

fn mlp_flops(rows: f64, d: usize, ratio: usize) -> f64 {
    let h = d * ratio;
    linear_flops(rows, d, h) + rows * h as f64 * NONLINEAR_FLOPS + linear_flops(rows, h, d)
}

fn video_params(c: &EncoderConfig) -> u64 {
    let d = c.width;
    let norm = 2 * d as u64;
    let attention = 4 * linear_params(d, d);
    let mlp = linear_params(d, d * c.mlp_ratio) + linear_params(d * c.mlp_ratio, d);
    let embed = linear_params(c.patch * c.patch * CHANNELS, d) + ((c.max_patches() + c.max_frames + 1) * d) as u64;
    embed + c.depth as u64 * (3 * norm + 2 * attention + mlp) + norm
}

fn text_params(c: &EncoderConfig) -> u64 {
    let d = c.text_width;
    let norm = 2 * d as u64;
    let block =
        2 * norm + 4 * linear_params(d, d) + linear_params(d, d * c.mlp_ratio) + linear_params(d * c.mlp_ratio, d);
    ((c.vocab_size + c.max_text_len) * d) as u64 + c.text_depth as u64 * block + norm
}

fn video_flops(c: &EncoderConfig, frames: usize, visible: usize) -> f64 {
    let d = c.width;
    let n_max = c.max_patches() as f64;
    let tokens = (frames * visible) as f64;
    let rows = tokens + 1.0;
    let fraction = visible as f64 / n_max;
    let embed = linear_flops(tokens, c.patch * c.patch * CHANNELS, d) + 2.0 * tokens * d as f64;

    // Every token sees its group plus [CLS]; [CLS] sees every row.
    let temporal_group = fraction * frames as f64;
    let spatial_group = visible as f64;
    let sub_attention = |group: f64| {
        norm_residual_flops(rows, d)
            + projection_flops(rows, d)
            + attention_core_flops(tokens * (group + 1.0) + rows, d, c.heads)
    };
    let temporal = if frames > 1 { sub_attention(temporal_group) } else { 0.0 };
    let block =
        temporal + sub_attention(spatial_group) + norm_residual_flops(rows, d) + mlp_flops(rows, d, c.mlp_ratio);
    embed + c.depth as f64 * block + rows * d as f64 * NONLINEAR_FLOPS
}

fn text_flops(c: &EncoderConfig, len: usize) -> f64 {
    let d = c.text_width;
    let rows = len as f64;
    let block = norm_residual_flops(rows, d)
        + projection_flops(rows, d)
        + attention_core_flops(rows * rows, d, c.text_heads)
        + norm_residual_flops(rows, d)
        + mlp_flops(rows, d, c.mlp_ratio);
    rows * d as f64 + c.text_depth as f64 * block + rows * d as f64 * NONLINEAR_FLOPS
}

/// Projection heads on both `[CLS]` rows plus L2 normalization.
fn head_flops(c: &EncoderConfig) -> f64 {
    linear_flops(1.0, c.width, c.projection)
        + linear_flops(1.0, c.text_width, c.projection)
        + 2.0 * 3.0 * c.projection as f64
}

/// Parameter and forward-FLOP accounting for one pair, counting one
/// multiply-accumulate as two FLOPs.
pub fn count_params_flops(
    cfg: &EncoderConfig,
    frames: usize,
    visible_per_frame: usize,
    text_len: usize,
) -> Result<FlopsReport, MetricsError> {
    cfg.validate().map_err(|e| MetricsError::Config(e.to_string()))?;
    let n = cfg.max_patches();
    if frames == 0 || frames > cfg.max_frames {
        return Err(MetricsError::Config(format!(
            "frames {frames} outside 1..={}",
            cfg.max_frames
        )));
    }
    if visible_per_frame > n {
        return Err(MetricsError::Config(format!(
            "{visible_per_frame} visible of {n} patches per frame"
        )));
    }
    if text_len == 0 || text_len > cfg.max_text_len {
        return Err(MetricsError::Config(format!(
            "text length {text_len} outside 1..={}",
            cfg.max_text_len
        )));
    }
    let video = SubnetworkCost {
        params: video_params(cfg),
        flops: video_flops(cfg, frames, visible_per_frame),
    };
    let text = SubnetworkCost {
        params: text_params(cfg),
        flops: text_flops(cfg, text_len),
    };
    let heads = SubnetworkCost {
        params: linear_params(cfg.width, cfg.projection) + linear_params(cfg.text_width, cfg.projection),
        flops: head_flops(cfg),
    };
    Ok(FlopsReport {
        frames,
        patches_per_frame: n,
        visible_per_frame,
        text_len,
        total_params: video.params + text.params + heads.params,
        total_flops: video.flops + text.flops + heads.flops,
        video,
        text,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::encoders::MacModel;
    use crate::vidpipe::masked_count;

    fn paper(visible: usize) -> FlopsReport {
        count_params_flops(&EncoderConfig::paper(), 4, visible, 128).unwrap()
    }

    #[test]
    fn parameters_match_instantiated_layouts() {
        for cfg in [EncoderConfig::desk(57), EncoderConfig::paper()] {
            let model = MacModel::new(cfg.clone()).unwrap();
            let r = count_params_flops(&cfg, 1, 1, 2).unwrap();
            assert_eq!(r.total_params, model.param_count() as u64);
            assert_eq!(r.video.params, model.param_count_with_prefix("video.") as u64);
            assert_eq!(r.text.params, model.param_count_with_prefix("text.") as u64);
            assert_eq!(r.heads.params, model.param_count_with_prefix("head.") as u64);
        }
    }

    #[test]
    fn paper_scale_totals() {
        let full = paper(196);
        let masked = paper(196 - masked_count(0.6, 196));
        assert_eq!(masked.visible_per_frame, 78);
        assert!(
            (full.total_mparams() - 180.7).abs() / 180.7 < 0.05,
            "{}",
            full.total_mparams()
        );
        assert!(
            (full.total_gflops() - 189.3).abs() / 189.3 < 0.15,
            "{}",
            full.total_gflops()
        );
        assert!(
            (masked.total_gflops() - 83.3).abs() / 83.3 < 0.15,
            "{}",
            masked.total_gflops()
        );
        assert!(masked.total_flops / full.total_flops <= 0.5);
        assert_eq!(masked.total_params, full.total_params);
    }

    #[test]
    fn video_savings_beat_the_visible_fraction() {
        let full = paper(196);
        for visible in [20usize, 50, 78, 120, 180] {
            let r = paper(visible);
            let f = visible as f64 / 196.0;
            assert!(r.video.flops / full.video.flops < f, "visible {visible}");
        }
    }

    #[test]
    fn no_visible_patches_leaves_cls_path() {
        let c = EncoderConfig::desk(40);
        let r = count_params_flops(&c, 4, 0, 16).unwrap();
        let d = c.width as f64;
        let h = (c.width * c.mlp_ratio) as f64;
        // One row per block: both sub-attentions over [CLS] alone, then MLP.
        let sub = 6.0 * d + 4.0 * (2.0 * d * d + d) + (4.0 * d + 5.0 * c.heads as f64);
        let mlp = 6.0 * d + (2.0 * d * h + h) + 5.0 * h + (2.0 * h * d + d);
        let expected = 2.0 * (2.0 * sub + mlp) + 5.0 * d;
        assert!((r.video.flops - expected).abs() < 1e-6);
    }

    /// Tiny one-block configuration summed op by op.
    #[test]
    fn one_block_hand_summation() {
        let c = EncoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            patch: 2,
            frame_size: 4,
            max_frames: 2,
            text_depth: 1,
            text_width: 4,
            text_heads: 1,
            max_text_len: 3,
            vocab_size: 5,
            projection: 2,
        };
        // 2 frames × 2 visible of 4 patches: 4 tokens, 5 rows.
        let r = count_params_flops(&c, 2, 2, 3).unwrap();
        let embed = 4.0 * (2.0 * 12.0 * 8.0 + 8.0) + 2.0 * 4.0 * 8.0;
        let ln_res = 5.0 * 8.0 * 6.0;
        let proj = 4.0 * 5.0 * (2.0 * 64.0 + 8.0);
        // Temporal groups: fraction 0.5 × 2 frames = 1 token each, plus [CLS].
        let temporal_pairs = 4.0 * 2.0 + 5.0;
        let spatial_pairs = 4.0 * 3.0 + 5.0;
        let per_pair = 4.0 * 8.0 + 5.0 * 2.0;
        let mlp = 5.0 * (2.0 * 8.0 * 16.0 + 16.0) + 5.0 * 16.0 * 5.0 + 5.0 * (2.0 * 16.0 * 8.0 + 8.0);
        let block =
            (ln_res + proj + temporal_pairs * per_pair) + (ln_res + proj + spatial_pairs * per_pair) + ln_res + mlp;
        let video = embed + block + 5.0 * 8.0 * 5.0;
        assert!((r.video.flops - video).abs() < 1e-9, "{} vs {video}", r.video.flops);

        let t_ln_res = 3.0 * 4.0 * 6.0;
        let t_proj = 4.0 * 3.0 * (2.0 * 16.0 + 4.0);
        let t_attn = 9.0 * (4.0 * 4.0 + 5.0);
        let t_mlp = 3.0 * (2.0 * 4.0 * 8.0 + 8.0) + 3.0 * 8.0 * 5.0 + 3.0 * (2.0 * 8.0 * 4.0 + 4.0);
        let text = 3.0 * 4.0 + (t_ln_res + t_proj + t_attn + t_ln_res + t_mlp) + 3.0 * 4.0 * 5.0;
        assert!((r.text.flops - text).abs() < 1e-9);
        let heads = (2.0 * 8.0 * 2.0 + 2.0) + (2.0 * 4.0 * 2.0 + 2.0) + 12.0;
        assert!((r.heads.flops - heads).abs() < 1e-9);
    }

    #[test]
    fn bad_queries_are_rejected() {
        let c = EncoderConfig::desk(40);
        assert!(count_params_flops(&c, 0, 4, 8).is_err());
        assert!(count_params_flops(&c, 5, 4, 8).is_err());
        assert!(count_params_flops(&c, 4, 17, 8).is_err());
        assert!(count_params_flops(&c, 4, 4, 17).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_every_size(frames in 1usize..4, visible in 0usize..16, len in 1usize..16, depth in 1usize..4, width_step in 1usize..4) {
            let mut c = EncoderConfig::desk(40);
            c.depth = depth;
            c.width = 16 * width_step;
            let base = count_params_flops(&c, frames, visible, len).unwrap().total_flops;
            prop_assert!(count_params_flops(&c, frames + 1, visible, len).unwrap().total_flops >= base);
            prop_assert!(count_params_flops(&c, frames, visible + 1, len).unwrap().total_flops >= base);
            prop_assert!(count_params_flops(&c, frames, visible, len + 1).unwrap().total_flops >= base);
            let mut deeper = c.clone();
            deeper.depth += 1;
            prop_assert!(count_params_flops(&deeper, frames, visible, len).unwrap().total_flops >= base);
            let mut wider = c.clone();
            wider.width += 16;
            prop_assert!(count_params_flops(&wider, frames, visible, len).unwrap().total_flops >= base);
        }
    }
}

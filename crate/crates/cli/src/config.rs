use std::path::{Path, PathBuf};

use mac_core::encoders::EncoderConfig;
use mac_core::objective::ContrastiveConfig;
use mac_core::trainer::{AdamConfig, MaskModality, SessionConfig, StepDecay, TrainConfig};
use mac_core::vidpipe::MaskStrategy;
use serde::{Deserialize, Serialize};

/// Flat run configuration: every encoder, schedule and objective knob plus
/// the data and output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub frame_size: usize,
    pub max_frames: usize,
    pub text_depth: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub projection: usize,

    pub epochs_a: usize,
    pub epochs_b: usize,
    pub batch_size: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_every: usize,
    pub decay_gamma: f64,
    pub video_ratio: f64,
    pub text_ratio: f64,
    pub strategy: MaskStrategy,
    pub modality: MaskModality,
    pub frames: usize,
    pub max_words: usize,
    pub seed: u64,

    pub tau_init: f64,
    pub learnable_tau: bool,
    pub tau_min: f64,
    pub tau_max: f64,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_session(&SessionConfig::desk())
    }
}

/// `(key, unit, description)` for every key, in declaration order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("depth", "blocks", "video transformer depth"),
    ("width", "channels", "video token width"),
    ("heads", "count", "video attention heads"),
    ("mlp_ratio", "x width", "MLP hidden expansion"),
    ("patch", "px", "square patch side"),
    ("frame_size", "px", "frames are resized to this square side"),
    ("max_frames", "frames", "temporal embedding table size"),
    ("text_depth", "blocks", "text transformer depth"),
    ("text_width", "channels", "text token width"),
    ("text_heads", "count", "text attention heads"),
    ("max_text_len", "tokens", "caption length including [CLS]"),
    (
        "vocab_size",
        "tokens",
        "0 = size of the vocabulary built from the captions",
    ),
    ("projection", "dims", "shared embedding width"),
    ("epochs_a", "epochs", "single-frame stage"),
    ("epochs_b", "epochs", "multi-frame stage"),
    ("batch_size", "pairs", "contrastive batch"),
    ("lr_a", "rate", "stage A learning rate"),
    ("lr_b", "rate", "stage B learning rate"),
    ("beta1", "-", "first moment decay"),
    ("beta2", "-", "second moment decay"),
    ("eps", "-", "optimizer epsilon"),
    ("weight_decay", "-", "decoupled decay on matrices"),
    ("decay_every", "epochs", "step schedule period, 0 = constant"),
    ("decay_gamma", "factor", "step schedule multiplier"),
    ("video_ratio", "fraction", "masked patches per frame"),
    ("text_ratio", "fraction", "masked words per caption"),
    ("strategy", "none|random|tube", "video mask strategy"),
    ("modality", "both|video_only|text_only|none", "masked inputs"),
    ("frames", "frames", "frames per clip in stage B"),
    ("max_words", "words", "whole-word vocabulary budget"),
    ("seed", "-", "global seed (MAC_SEED overrides)"),
    ("tau_init", "-", "initial temperature"),
    ("learnable_tau", "bool", "learn the temperature"),
    ("tau_min", "-", "temperature floor"),
    ("tau_max", "-", "temperature ceiling"),
    ("data", "path", "training dataset directory"),
    ("out", "path", "output directory"),
];

impl RunConfig {
    pub fn from_session(s: &SessionConfig) -> Self {
        let (e, t, c) = (&s.encoder, &s.train, &s.contrastive);
        Self {
            depth: e.depth,
            width: e.width,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            patch: e.patch,
            frame_size: e.frame_size,
            max_frames: e.max_frames,
            text_depth: e.text_depth,
            text_width: e.text_width,
            text_heads: e.text_heads,
            max_text_len: e.max_text_len,
            vocab_size: e.vocab_size,
            projection: e.projection,
            epochs_a: t.epochs_a,
            epochs_b: t.epochs_b,
            batch_size: t.batch_size,
            lr_a: t.lr_a,
            lr_b: t.lr_b,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            decay_every: t.decay.every,
            decay_gamma: t.decay.gamma,
            video_ratio: t.video_ratio,
            text_ratio: t.text_ratio,
            strategy: t.strategy,
            modality: t.modality,
            frames: t.frames,
            max_words: t.max_words,
            seed: t.seed,
            tau_init: c.tau_init,
            learnable_tau: c.learnable_tau,
            tau_min: c.tau_min,
            tau_max: c.tau_max,
            data: None,
            out: None,
        }
    }

    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            encoder: EncoderConfig {
                depth: self.depth,
                width: self.width,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                patch: self.patch,
                frame_size: self.frame_size,
                max_frames: self.max_frames,
                text_depth: self.text_depth,
                text_width: self.text_width,
                text_heads: self.text_heads,
                max_text_len: self.max_text_len,
                vocab_size: self.vocab_size,
                projection: self.projection,
            },
            train: TrainConfig {
                epochs_a: self.epochs_a,
                epochs_b: self.epochs_b,
                batch_size: self.batch_size,
                lr_a: self.lr_a,
                lr_b: self.lr_b,
                adam: AdamConfig {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.eps,
                    weight_decay: self.weight_decay,
                },
                decay: StepDecay {
                    every: self.decay_every,
                    gamma: self.decay_gamma,
                },
                video_ratio: self.video_ratio,
                text_ratio: self.text_ratio,
                strategy: self.strategy,
                modality: self.modality,
                frames: self.frames,
                max_words: self.max_words,
                seed: self.seed,
            },
            contrastive: ContrastiveConfig {
                tau_init: self.tau_init,
                learnable_tau: self.learnable_tau,
                tau_min: self.tau_min,
                tau_max: self.tau_max,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Key reference with the default of every key, for `--help`.
    pub fn help_table() -> String {
        let defaults = serde_json::to_value(Self::default()).expect("config serializes");
        let mut out = String::from("Config keys (flat JSON object; unknown keys are rejected):\n");
        for (key, unit, doc) in KEYS {
            let value = defaults.get(*key).map_or("null".to_string(), |v| v.to_string());
            out.push_str(&format!("  {key:<14} {value:<10} [{unit}] {doc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_round_trip() {
        let s = SessionConfig::desk();
        assert_eq!(RunConfig::from_session(&s).session(), s);
    }

    #[test]
    fn every_key_is_documented() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), KEYS.len());
        for (k, _, _) in KEYS {
            assert!(obj.contains_key(*k), "{k}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"depth": 2, "dept": 3}"#).unwrap_err();
        assert!(err.to_string().contains("dept"), "{err}");
        let ok: RunConfig = serde_json::from_str(r#"{"epochs_b": 3}"#).unwrap();
        assert_eq!(ok.epochs_b, 3);
    }
}

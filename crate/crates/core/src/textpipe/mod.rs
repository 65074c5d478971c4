//! Caption side of the input pipeline: a small frequency-ordered vocabulary,
//! a word-aware tokenizer, and whole-word `[MASK]` replacement.

mod mask;
mod vocab;

pub use mask::{apply_text_mask, sample_text_mask, TextMaskPlan};
pub use vocab::{normalize_words, tokenize, TextSequence, Vocabulary, CLS, MASK, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("vocabulary format: {0}")]
    Format(String),
    #[error("text mask ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("mask plan does not belong to this sequence: {0}")]
    PlanMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Masked contrastive video-text pre-training at desk scale.
//!
//! Video clips are cut into spatio-temporal patches, a large fraction of
//! which is dropped before encoding; captions have whole words replaced by
//! `[MASK]`. A divided space-time video transformer and a text transformer
//! encode what remains, and a symmetric InfoNCE loss aligns the two
//! `[CLS]` embeddings. The crate also carries the analytic FLOPs/parameter
//! accounting, retrieval metrics, a synthetic paired dataset and the
//! training loop with checkpointing.

pub mod diffcore;
pub mod encoders;
pub mod exec;
pub mod metrics;
pub mod objective;
pub mod seed;
pub mod textpipe;
pub mod trainer;
pub mod vidpipe;

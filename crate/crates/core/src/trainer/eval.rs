use serde::{Deserialize, Serialize};

use super::train::{clip_patches, eval_frames};
use super::{Checkpoint, Sample, TrainError};
use crate::diffcore::Tape;
use crate::encoders::MacModel;
use crate::exec::Execution;
use crate::metrics::{Direction, RetrievalReport};
use crate::objective::{similarity, EmbeddingBatch};
use crate::seed::{self, tag};
use crate::textpipe::{apply_text_mask, sample_text_mask, tokenize, TextSequence};
use crate::vidpipe::{sample_mask, MaskPlan, MaskStrategy, PatchSet};

/// Retrieval in both directions over unmasked inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub frames: usize,
    pub text_to_video: RetrievalReport,
    pub video_to_text: RetrievalReport,
}

struct Encoder<'a> {
    model: MacModel,
    ck: &'a Checkpoint,
}

impl<'a> Encoder<'a> {
    fn new(ck: &'a Checkpoint) -> Result<Self, TrainError> {
        Ok(Self { model: ck.model()?, ck })
    }

    fn video(&self, patches: &PatchSet, plan: &MaskPlan) -> Result<Vec<f64>, TrainError> {
        let mut tape = Tape::<f32>::new();
        let v = self.model.embed_video(&mut tape, &self.ck.params, patches, plan)?;
        Ok(tape.value(v).to_f64_vec())
    }

    fn text(&self, seq: &TextSequence) -> Result<Vec<f64>, TrainError> {
        let mut tape = Tape::<f32>::new();
        let t = self.model.embed_text(&mut tape, &self.ck.params, seq)?;
        Ok(tape.value(t).to_f64_vec())
    }

    fn patches(&self, s: &Sample, frames: usize) -> Result<PatchSet, TrainError> {
        clip_patches(&s.clip, &eval_frames(s.clip.frames(), frames), &self.ck.config.encoder)
    }

    fn sequence(&self, s: &Sample) -> Result<TextSequence, TrainError> {
        Ok(tokenize(
            &s.caption,
            &self.ck.vocab,
            self.ck.config.encoder.max_text_len,
        )?)
    }
}

fn check_frames(ck: &Checkpoint, frames: usize) -> Result<(), TrainError> {
    let max = ck.config.encoder.max_frames;
    if frames == 0 || frames > max {
        return Err(TrainError::Config(format!("frames {frames} outside 1..={max}")));
    }
    Ok(())
}

/// Unmasked unit embeddings of every pair, in sample order.
pub fn embed_pairs(
    ck: &Checkpoint,
    samples: &[Sample],
    frames: usize,
    exec: Execution,
) -> Result<EmbeddingBatch, TrainError> {
    check_frames(ck, frames)?;
    if samples.is_empty() {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let enc = Encoder::new(ck)?;
    let rows = exec.try_map(samples.len(), |i| {
        let s = &samples[i];
        let patches = enc.patches(s, frames)?;
        let v = enc.video(&patches, &MaskPlan::full(patches.frames(), patches.per_frame()))?;
        let t = enc.text(&enc.sequence(s)?)?;
        Ok::<_, TrainError>((v, t))
    })?;
    let (video, text): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(EmbeddingBatch::from_rows(&video, &text)?)
}

/// Ranks the full similarity matrix of unmasked pairs. Training-time mask
/// ratios play no part.
pub fn evaluate(ck: &Checkpoint, samples: &[Sample], frames: usize, exec: Execution) -> Result<EvalReport, TrainError> {
    let sim = similarity(&embed_pairs(ck, samples, frames, exec)?);
    Ok(EvalReport {
        pairs: samples.len(),
        frames,
        text_to_video: RetrievalReport::compute(&sim, Direction::TextToVideo),
        video_to_text: RetrievalReport::compute(&sim, Direction::VideoToText),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub trials: usize,
    pub video_ratio: f64,
    pub text_ratio: f64,
    pub strategy: MaskStrategy,
    pub frames: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            video_ratio: 0.6,
            text_ratio: 0.15,
            strategy: MaskStrategy::Random,
            frames: 4,
            seed: 0,
        }
    }
}

/// Mean and population standard deviation of one clip's trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTrend {
    pub id: u64,
    /// Masked video view against the full video view.
    pub video_mean: f64,
    pub video_std: f64,
    /// Masked caption against the full caption.
    pub text_mean: f64,
    pub text_std: f64,
    /// Masked video view against the masked caption of the same trial.
    pub cross_mean: f64,
    pub cross_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub clips: Vec<ClipTrend>,
    pub video_mean: f64,
    pub text_mean: f64,
    pub cross_mean: f64,
}

/// `a·b / sqrt(|a|²|b|²)`; exactly 1 for identical vectors.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Masks every clip and caption `trials` times and measures how close the
/// masked embeddings stay to the full ones.
pub fn similarity_probe(
    ck: &Checkpoint,
    samples: &[Sample],
    cfg: &ProbeConfig,
    exec: Execution,
) -> Result<ProbeReport, TrainError> {
    if cfg.trials < 2 {
        return Err(TrainError::Config(format!("trials {} must be at least 2", cfg.trials)));
    }
    check_frames(ck, cfg.frames)?;
    if samples.is_empty() {
        return Err(TrainError::Config("no clips to probe".into()));
    }
    let enc = Encoder::new(ck)?;
    let clips = exec.try_map(samples.len(), |i| {
        let s = &samples[i];
        let patches = enc.patches(s, cfg.frames)?;
        let seq = enc.sequence(s)?;
        let full_v = enc.video(&patches, &MaskPlan::full(patches.frames(), patches.per_frame()))?;
        let full_t = enc.text(&seq)?;
        let (mut vs, mut ts, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for trial in 0..cfg.trials as u64 {
            let base = seed::derive(cfg.seed, &[tag::PROBE, s.id, trial]);
            let plan = sample_mask(
                cfg.strategy,
                cfg.video_ratio,
                patches.frames(),
                patches.per_frame(),
                seed::derive(base, &[tag::VIDEO_MASK]),
            )?;
            let masked_seq = apply_text_mask(
                &seq,
                &sample_text_mask(&seq, cfg.text_ratio, seed::derive(base, &[tag::TEXT_MASK]))?,
            )?;
            let v = enc.video(&patches, &plan)?;
            let t = enc.text(&masked_seq)?;
            vs.push(cosine(&v, &full_v));
            ts.push(cosine(&t, &full_t));
            cs.push(cosine(&v, &t));
        }
        let ((video_mean, video_std), (text_mean, text_std), (cross_mean, cross_std)) =
            (mean_std(&vs), mean_std(&ts), mean_std(&cs));
        Ok::<_, TrainError>(ClipTrend {
            id: s.id,
            video_mean,
            video_std,
            text_mean,
            text_std,
            cross_mean,
            cross_std,
        })
    })?;
    let avg = |f: fn(&ClipTrend) -> f64| clips.iter().map(f).sum::<f64>() / clips.len() as f64;
    Ok(ProbeReport {
        config: cfg.clone(),
        video_mean: avg(|c| c.video_mean),
        text_mean: avg(|c| c.text_mean),
        cross_mean: avg(|c| c.cross_mean),
        clips,
    })
}

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, Checkpoint, Dataset, Sample, SessionConfig, StepDecay, TrainError, LOG_TAU};
use crate::diffcore::{Array, Tape, Var};
use crate::encoders::{EncoderConfig, MacModel};
use crate::exec::Execution;
use crate::objective::{eq1_margin, infonce_with_grad, similarity, EmbeddingBatch};
use crate::seed::{self, tag};
use crate::textpipe::{apply_text_mask, sample_text_mask, tokenize, TextSequence, Vocabulary};
use crate::vidpipe::{patchify, sample_mask, MaskPlan, MaskStrategy, PatchSet, VideoClip};

/// Training stage: A sees one frame per clip, B sees `frames` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

/// Which inputs are masked during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskModality {
    #[default]
    Both,
    VideoOnly,
    TextOnly,
    None,
}

impl MaskModality {
    pub const ALL: [MaskModality; 4] = [Self::Both, Self::VideoOnly, Self::TextOnly, Self::None];

    pub fn masks_video(self) -> bool {
        matches!(self, Self::Both | Self::VideoOnly)
    }

    pub fn masks_text(self) -> bool {
        matches!(self, Self::Both | Self::TextOnly)
    }
}

impl std::str::FromStr for MaskModality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "video_only" => Ok(Self::VideoOnly),
            "text_only" => Ok(Self::TextOnly),
            "none" => Ok(Self::None),
            other => Err(format!(
                "unknown mask modality `{other}` (both|video_only|text_only|none)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_a: usize,
    pub epochs_b: usize,
    pub batch_size: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub adam: AdamConfig,
    /// Restarts at the beginning of each stage.
    pub decay: StepDecay,
    pub video_ratio: f64,
    pub text_ratio: f64,
    pub strategy: MaskStrategy,
    pub modality: MaskModality,
    /// Frames per clip in stage B.
    pub frames: usize,
    /// Whole-word vocabulary budget.
    pub max_words: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_a: 10,
            epochs_b: 150,
            batch_size: 16,
            lr_a: 1e-3,
            lr_b: 1e-3,
            adam: AdamConfig::default(),
            decay: StepDecay::default(),
            video_ratio: 0.6,
            text_ratio: 0.15,
            strategy: MaskStrategy::Random,
            modality: MaskModality::Both,
            frames: 4,
            max_words: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_a + self.epochs_b
    }

    /// Stage and epoch-within-stage of global epoch `epoch` (0-based).
    pub fn stage_of(&self, epoch: usize) -> (Stage, usize) {
        if epoch < self.epochs_a {
            (Stage::A, epoch)
        } else {
            (Stage::B, epoch - self.epochs_a)
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.frames == 0 || self.frames > encoder.max_frames {
            return Err(TrainError::Config(format!(
                "frames {} outside 1..={}",
                self.frames, encoder.max_frames
            )));
        }
        for (name, r) in [("video_ratio", self.video_ratio), ("text_ratio", self.text_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        for (name, lr) in [("lr_a", self.lr_a), ("lr_b", self.lr_b)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(TrainError::Config(format!(
                    "{name} {lr} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub margin: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Random single frame for stage A; `m` evenly strided frames with a random
/// phase for stage B.
pub fn train_frames(stage: Stage, available: usize, m: usize, rng: &mut seed::Rng) -> Vec<usize> {
    match stage {
        Stage::A => vec![rng.gen_range(0..available)],
        Stage::B => {
            let m = m.min(available);
            let stride = available / m;
            let phase = rng.gen_range(0..stride);
            (0..m).map(|k| phase + k * stride).collect()
        }
    }
}

/// Evenly strided frames starting at the first.
pub fn eval_frames(available: usize, m: usize) -> Vec<usize> {
    let m = m.min(available).max(1);
    let stride = available / m;
    (0..m).map(|k| k * stride).collect()
}

pub(crate) fn clip_patches(clip: &VideoClip, frames: &[usize], cfg: &EncoderConfig) -> Result<PatchSet, TrainError> {
    let clip = clip.select_frames(frames)?.preprocess(cfg.frame_size)?;
    Ok(patchify(&clip, cfg.patch)?)
}

/// Fresh parameters and optimizer state. A `vocab_size` of 0 in the
/// encoder configuration is resolved to the vocabulary's size.
pub fn initial_checkpoint(mut config: SessionConfig, vocab: Vocabulary) -> Result<Checkpoint, TrainError> {
    if config.encoder.vocab_size == 0 {
        config.encoder.vocab_size = vocab.len();
    }
    if config.encoder.vocab_size < vocab.len() {
        return Err(TrainError::Config(format!(
            "vocab_size {} is smaller than the {} tokens built from the captions",
            config.encoder.vocab_size,
            vocab.len()
        )));
    }
    config.contrastive.validate()?;
    let model = MacModel::new(config.encoder.clone())?;
    config.train.validate(&config.encoder)?;
    let mut params = model.init_params::<f32>(seed::derive(config.train.seed, &[tag::INIT]))?;
    let log_tau = config.contrastive.initial_log_tau() as f32;
    params.insert(LOG_TAU, Array::new(vec![1], vec![log_tau])?)?;
    let adam = AdamState::new(&params);
    Ok(Checkpoint {
        config,
        vocab,
        params,
        adam,
        epoch: 0,
    })
}

/// Builds the vocabulary from `dataset` and runs the full schedule.
pub fn train(config: SessionConfig, dataset: &Dataset, exec: Execution) -> Result<TrainOutcome, TrainError> {
    train_with_log(config, dataset, exec, |_| {})
}

pub fn train_with_log(
    config: SessionConfig,
    dataset: &Dataset,
    exec: Execution,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let vocab = Vocabulary::build(dataset.captions(), config.train.max_words);
    let ck = initial_checkpoint(config, vocab)?;
    resume(ck, dataset, exec, on_epoch)
}

struct Forward {
    tape: Tape<f32>,
    video: Var,
    text: Var,
}

struct Step<'a> {
    model: &'a MacModel,
    ck: &'a Checkpoint,
    stage: Stage,
    epoch: u64,
}

impl Step<'_> {
    fn inputs(&self, s: &Sample) -> Result<(PatchSet, MaskPlan, TextSequence), TrainError> {
        let cfg = &self.ck.config;
        let t = &cfg.train;
        let mut rng = seed::rng_for(t.seed, &[tag::FRAMES, self.epoch, s.id]);
        let frames = train_frames(self.stage, s.clip.frames(), t.frames, &mut rng);
        let patches = clip_patches(&s.clip, &frames, &cfg.encoder)?;
        let plan = if t.modality.masks_video() {
            let mseed = seed::derive(t.seed, &[tag::VIDEO_MASK, self.epoch, s.id]);
            sample_mask(t.strategy, t.video_ratio, patches.frames(), patches.per_frame(), mseed)?
        } else {
            MaskPlan::full(patches.frames(), patches.per_frame())
        };
        let mut seq = tokenize(&s.caption, &self.ck.vocab, cfg.encoder.max_text_len)?;
        if t.modality.masks_text() {
            let tseed = seed::derive(t.seed, &[tag::TEXT_MASK, self.epoch, s.id]);
            seq = apply_text_mask(&seq, &sample_text_mask(&seq, t.text_ratio, tseed)?)?;
        }
        Ok((patches, plan, seq))
    }

    fn forward(&self, s: &Sample) -> Result<Forward, TrainError> {
        let (patches, plan, seq) = self.inputs(s)?;
        let mut tape = Tape::new();
        let video = self.model.embed_video(&mut tape, &self.ck.params, &patches, &plan)?;
        let text = self.model.embed_text(&mut tape, &self.ck.params, &seq)?;
        Ok(Forward { tape, video, text })
    }
}

fn all_finite(ck: &Checkpoint) -> bool {
    ck.params.iter().all(|(_, p)| p.value.is_finite())
}

fn diverged(epoch: usize, step: usize, last_good: &Checkpoint) -> TrainError {
    TrainError::Diverged {
        epoch,
        step,
        last_good: Box::new(last_good.clone()),
    }
}

/// Turns a non-finite value raised inside the model into a divergence.
fn or_diverged<R>(
    r: Result<R, TrainError>,
    epoch: usize,
    step: usize,
    last_good: &Checkpoint,
) -> Result<R, TrainError> {
    r.map_err(|e| {
        if e.is_non_finite() {
            diverged(epoch, step, last_good)
        } else {
            e
        }
    })
}

/// Continues training `ck` until the configured number of epochs.
pub fn resume(
    mut ck: Checkpoint,
    dataset: &Dataset,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let cfg = ck.config.clone();
    let t = &cfg.train;
    t.validate(&cfg.encoder)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if t.batch_size > dataset.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the {} training pairs",
            t.batch_size,
            dataset.len()
        )));
    }
    let model = ck.model()?;
    let tau_id = ck.params.require(LOG_TAU)?;
    let dim = cfg.encoder.projection;
    let (lo, hi) = (cfg.contrastive.tau_min.ln() as f32, cfg.contrastive.tau_max.ln() as f32);
    let mut log = Vec::new();

    for epoch in ck.epoch..t.total_epochs() {
        let (stage, within) = t.stage_of(epoch);
        let lr = t.decay.rate(if stage == Stage::A { t.lr_a } else { t.lr_b }, within);
        let last_good = ck.clone();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng_for(t.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut margin_sum, mut steps, mut margin_steps) = (0.0, 0.0, 0usize, 0usize);

        for (step, batch) in order.chunks(t.batch_size).filter(|b| b.len() >= 2).enumerate() {
            let plan = Step {
                model: &model,
                ck: &ck,
                stage,
                epoch: epoch as u64,
            };
            let fwd = exec.try_map(batch.len(), |i| plan.forward(&dataset.samples[batch[i]]));
            let fwd = or_diverged(fwd, epoch + 1, step, &last_good)?;
            let rows = |pick: fn(&Forward) -> Var| -> Vec<f64> {
                fwd.iter().flat_map(|f| f.tape.value(pick(f)).to_f64_vec()).collect()
            };
            let embeddings = EmbeddingBatch::new(dim, rows(|f| f.video), rows(|f| f.text))?;
            let log_tau = f64::from(ck.params.value(tau_id).data()[0]);
            let out = infonce_with_grad(&embeddings, log_tau, &cfg.contrastive)?;
            if !out.loss.is_finite() {
                return Err(diverged(epoch + 1, step, &last_good));
            }
            let grads = exec.try_map(batch.len(), |i| {
                let f = &fwd[i];
                let row = |g: &[f64]| Array::from_f64(vec![1, dim], &g[i * dim..(i + 1) * dim]);
                f.tape
                    .backward_seeded(&[(f.video, row(&out.grad_video)?), (f.text, row(&out.grad_text)?)])
            });
            let grads = or_diverged(grads.map_err(TrainError::from), epoch + 1, step, &last_good)?;
            drop(fwd);

            ck.params.zero_grads();
            for g in &grads {
                g.accumulate_into(&mut ck.params);
            }
            if cfg.contrastive.learnable_tau {
                ck.params.get_mut(tau_id).grad.data_mut()[0] = out.grad_log_tau as f32;
            }
            ck.adam.update(&mut ck.params, &t.adam, lr);
            let lt = &mut ck.params.get_mut(tau_id).value.data_mut()[0];
            *lt = lt.clamp(lo, hi);
            if !all_finite(&ck) {
                return Err(diverged(epoch + 1, step, &last_good));
            }

            loss_sum += out.loss;
            steps += 1;
            if let Ok(m) = eq1_margin(&similarity(&embeddings)) {
                margin_sum += m;
                margin_steps += 1;
            }
        }

        ck.params.zero_grads();
        ck.epoch = epoch + 1;
        let entry = EpochLog {
            epoch: epoch + 1,
            stage,
            loss: loss_sum / steps.max(1) as f64,
            margin: margin_sum / margin_steps.max(1) as f64,
            tau: ck.tau(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

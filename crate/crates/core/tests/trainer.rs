use mac_core::diffcore::Tape;
use mac_core::encoders::{DividedLayouts, MacModel};
use mac_core::exec::Execution;
use mac_core::seed;
use mac_core::textpipe::Vocabulary;
use mac_core::trainer::{
    evaluate, generate_dataset, initial_checkpoint, resume, similarity_probe, train, train_frames, Checkpoint, Dataset,
    MaskModality, ProbeConfig, SessionConfig, Stage, SyntheticDatasetSpec, TrainError,
};
use mac_core::vidpipe::{embed_and_gather, patchify, MaskPlan, MaskStrategy};
use proptest::prelude::*;

fn dataset(count: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec {
        count,
        seed,
        ..Default::default()
    };
    let ds = generate_dataset(&spec, dir.path().join("data")).unwrap();
    (dir, ds)
}

fn short() -> SessionConfig {
    let mut cfg = SessionConfig::desk();
    cfg.train.epochs_a = 1;
    cfg.train.epochs_b = 1;
    cfg.train.batch_size = 8;
    cfg
}

fn params_bytes(ck: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    ck.params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (_d, ds) = dataset(16, 0);
    let mut cfg = short();
    cfg.train.lr_a = 0.0;
    cfg.train.lr_b = 0.0;
    let init = initial_checkpoint(cfg.clone(), Vocabulary::build(ds.captions(), cfg.train.max_words)).unwrap();
    let out = train(cfg, &ds, Execution::Parallel).unwrap();
    assert_eq!(params_bytes(&out.checkpoint), params_bytes(&init));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (_d, ds) = dataset(16, 0);
    let a = train(short(), &ds, Execution::Parallel).unwrap();
    let b = train(short(), &ds, Execution::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());

    let mut other = short();
    other.train.seed = 1;
    let c = train(other, &ds, Execution::Parallel).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let (_d, ds) = dataset(16, 3);
    let a = train(short(), &ds, Execution::Sequential).unwrap();
    let b = train(short(), &ds, Execution::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn resuming_from_a_saved_checkpoint_matches_one_run() {
    let (dir, ds) = dataset(16, 0);
    let mut full = short();
    full.train.epochs_b = 2;
    let straight = train(full.clone(), &ds, Execution::Parallel).unwrap();

    let first = train(short(), &ds, Execution::Parallel).unwrap();
    let path = dir.path().join("mid.macckpt");
    first.checkpoint.save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.config.train.epochs_b = 2;
    let resumed = resume(ck, &ds, Execution::Parallel, |_| {}).unwrap();
    assert_eq!(resumed.log, straight.log[2..]);
    assert_eq!(resumed.checkpoint.to_bytes(), straight.checkpoint.to_bytes());
}

#[test]
fn loss_log_has_one_finite_entry_per_epoch() {
    let (_d, ds) = dataset(16, 0);
    let out = train(short(), &ds, Execution::Parallel).unwrap();
    let stages: Vec<Stage> = out.log.iter().map(|e| e.stage).collect();
    assert_eq!(stages, [Stage::A, Stage::B]);
    for (i, e) in out.log.iter().enumerate() {
        assert_eq!(e.epoch, i + 1);
        assert!(e.loss.is_finite() && e.margin.is_finite() && e.tau > 0.0);
    }
}

#[test]
fn divergence_returns_the_last_good_state() {
    let (_d, ds) = dataset(16, 0);
    let mut cfg = short();
    cfg.train.lr_a = 1e30;
    match train(cfg, &ds, Execution::Parallel) {
        Err(TrainError::Diverged { epoch, last_good, .. }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.epoch, 0);
            assert!(last_good.params.iter().all(|(_, p)| p.value.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn bad_configurations_are_rejected() {
    let (_d, ds) = dataset(4, 0);
    let mut cfg = short();
    assert!(matches!(
        train(cfg.clone(), &ds, Execution::Parallel),
        Err(TrainError::Config(_))
    ));
    cfg.train.batch_size = 1;
    assert!(matches!(
        train(cfg.clone(), &ds, Execution::Parallel),
        Err(TrainError::Config(_))
    ));
    cfg.train.batch_size = 4;
    cfg.train.frames = 5;
    assert!(matches!(
        train(cfg.clone(), &ds, Execution::Parallel),
        Err(TrainError::Config(_))
    ));
    cfg.train.frames = 4;
    cfg.train.video_ratio = 1.0;
    assert!(matches!(
        train(cfg, &ds, Execution::Parallel),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn every_modality_and_strategy_trains() {
    let (_d, ds) = dataset(16, 0);
    for modality in MaskModality::ALL {
        for strategy in [MaskStrategy::None, MaskStrategy::Random, MaskStrategy::Tube] {
            let mut cfg = short();
            cfg.train.modality = modality;
            cfg.train.strategy = strategy;
            let out = train(cfg, &ds, Execution::Parallel).unwrap();
            assert!(out.log.iter().all(|e| e.loss.is_finite()), "{modality:?} {strategy:?}");
        }
    }
}

#[test]
fn evaluation_ignores_training_mask_ratios() {
    let (_d, ds) = dataset(16, 0);
    let ck = train(short(), &ds, Execution::Parallel).unwrap().checkpoint;
    let mut other = ck.clone();
    other.config.train.video_ratio = 0.9;
    other.config.train.text_ratio = 0.5;
    other.config.train.strategy = MaskStrategy::Tube;
    let a = evaluate(&ck, &ds.samples, 4, Execution::Parallel).unwrap();
    let b = evaluate(&other, &ds.samples, 4, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn untrained_recall_is_near_chance() {
    let (_d, ds) = dataset(64, 1);
    let chance = 100.0 / 64.0;
    let mut total = 0.0;
    for s in 0..5 {
        let mut cfg = SessionConfig::desk();
        cfg.train.seed = s;
        let ck = initial_checkpoint(cfg, Vocabulary::build(ds.captions(), 1000)).unwrap();
        total += evaluate(&ck, &ds.samples, 4, Execution::Parallel)
            .unwrap()
            .text_to_video
            .r1;
    }
    let mean = total / 5.0;
    assert!(mean <= 3.0 * chance, "mean untrained R@1 {mean}");
}

#[test]
fn probe_without_masking_is_exactly_one() {
    let (_d, ds) = dataset(8, 0);
    let ck = initial_checkpoint(SessionConfig::desk(), Vocabulary::build(ds.captions(), 1000)).unwrap();
    let cfg = ProbeConfig {
        trials: 3,
        video_ratio: 0.0,
        text_ratio: 0.0,
        ..Default::default()
    };
    let r = similarity_probe(&ck, &ds.samples, &cfg, Execution::Parallel).unwrap();
    assert_eq!(r.video_mean, 1.0);
    assert_eq!(r.text_mean, 1.0);
    for c in &r.clips {
        assert_eq!(
            (c.video_mean, c.video_std, c.text_mean, c.text_std),
            (1.0, 0.0, 1.0, 0.0)
        );
    }
}

#[test]
fn probe_is_deterministic_and_needs_two_trials() {
    let (_d, ds) = dataset(4, 0);
    let ck = initial_checkpoint(SessionConfig::desk(), Vocabulary::build(ds.captions(), 1000)).unwrap();
    let cfg = ProbeConfig {
        trials: 5,
        ..Default::default()
    };
    let a = similarity_probe(&ck, &ds.samples, &cfg, Execution::Parallel).unwrap();
    let b = similarity_probe(&ck, &ds.samples, &cfg, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.video_mean < 1.0);
    let one = ProbeConfig { trials: 1, ..cfg };
    assert!(matches!(
        similarity_probe(&ck, &ds.samples, &one, Execution::Parallel),
        Err(TrainError::Config(_))
    ));
}

proptest! {
    #[test]
    fn stage_a_sees_one_frame_and_no_temporal_groups(available in 1usize..9, m in 1usize..5, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let frames = train_frames(Stage::A, available, m, &mut rng);
        prop_assert_eq!(frames.len(), 1);
        prop_assert!(frames[0] < available);

        let clip = SyntheticDatasetSpec { count: 1, frames: available, speed: 0, ..Default::default() }.render(s % 64).1;
        let patches = patchify(&clip.select_frames(&frames).unwrap(), 8).unwrap();
        let model = MacModel::new(mac_core::encoders::EncoderConfig::desk(8)).unwrap();
        let store = model.init_params::<f32>(0).unwrap();
        let mut tape = Tape::new();
        let plan = MaskPlan::full(1, patches.per_frame());
        let tokens = embed_and_gather(&mut tape, &store, &model.video.embedding, &patches, &plan).unwrap();
        prop_assert!(DividedLayouts::new(&tokens).unwrap().temporal.is_none());
    }

    #[test]
    fn stage_b_frames_are_strided_and_in_range(available in 1usize..17, m in 1usize..5, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let frames = train_frames(Stage::B, available, m, &mut rng);
        prop_assert_eq!(frames.len(), m.min(available));
        prop_assert!(frames.iter().all(|&f| f < available));
        prop_assert!(frames.windows(2).all(|w| w[1] - w[0] == available / m.min(available)));
    }
}

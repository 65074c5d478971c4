mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mac_core::encoders::EncoderConfig;
use mac_core::exec::Execution;
use mac_core::metrics::count_params_flops;
use mac_core::trainer::{
    self, evaluate, generate_dataset, similarity_probe, Checkpoint, Dataset, ProbeConfig, SessionConfig,
    SyntheticDatasetSpec, TrainError,
};
use mac_core::vidpipe::{masked_count, MaskStrategy};
use serde_json::json;

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.macckpt";
const LOG_FILE: &str = "train_log.jsonl";
const CONFIG_FILE: &str = "run_config.json";

#[derive(Parser)]
#[command(
    name = "mac",
    version,
    about = "Masked contrastive video-text pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    Gen(GenArgs),
    /// Run the two-stage training schedule.
    #[command(after_help = RunConfig::help_table())]
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on unmasked pairs.
    Eval(EvalArgs),
    /// Analytic parameter and FLOPs count of one video-text pair.
    Flops(FlopsArgs),
    /// Similarity of masked views to full views.
    Probe(ProbeArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Dataset spec as JSON; replaces the inline flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Frame side [px].
    #[arg(long, default_value_t = 32)]
    frame_size: usize,
    /// Object side [px].
    #[arg(long, default_value_t = 12)]
    object_size: usize,
    /// Motion per frame [px].
    #[arg(long, default_value_t = 4)]
    speed: usize,
    /// Trail length behind the object [px].
    #[arg(long, default_value_t = 4)]
    trail: usize,
    /// Background jitter around mid gray [levels].
    #[arg(long, default_value_t = 30)]
    noise: u8,
    /// Dataset seed (MAC_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Flat JSON run configuration; missing keys take the defaults below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory (overrides `data` in the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, log and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (MAC_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory to rank.
    #[arg(long)]
    data: PathBuf,
    /// Frames sampled per clip [frames].
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(clap::Args)]
struct FlopsArgs {
    /// Model scale.
    #[arg(long, value_enum, default_value_t = Scale::Paper)]
    scale: Scale,
    /// Fraction of patches dropped per frame [0, 1).
    #[arg(long, default_value_t = 0.6)]
    mask_ratio: f64,
    /// Frames per clip [frames].
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Text length [tokens]; 0 = the scale's maximum.
    #[arg(long, default_value_t = 0)]
    text_len: usize,
    /// Vocabulary size at desk scale [tokens].
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
}

#[derive(clap::Args)]
struct ProbeArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory with the clips to probe.
    #[arg(long)]
    data: PathBuf,
    /// Masked views per clip.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Fraction of patches dropped per frame [0, 1).
    #[arg(long, default_value_t = 0.6)]
    mask_ratio: f64,
    /// Fraction of words masked per caption [0, 1).
    #[arg(long, default_value_t = 0.15)]
    text_ratio: f64,
    /// Video mask strategy.
    #[arg(long, default_value = "random", value_parser = parse_strategy)]
    strategy: MaskStrategy,
    /// Frames sampled per clip [frames].
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Probe at most this many clips [clips]; 0 = all.
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Probe seed (MAC_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

fn parse_strategy(s: &str) -> Result<MaskStrategy, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Encoder(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn env_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    match std::env::var("MAC_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("MAC_SEED: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn emit(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON serializes"));
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Data(format!("--spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("--spec {}: {e}", p.display())))?
        }
        None => SyntheticDatasetSpec {
            count: a.count,
            frames: a.frames,
            frame_size: a.frame_size,
            object_size: a.object_size,
            speed: a.speed,
            trail: a.trail,
            noise: a.noise,
            seed: a.seed,
        },
    };
    if let Some(seed) = env_seed(None)? {
        spec.seed = seed;
    }
    let ds = generate_dataset(&spec, &a.out)?;
    emit(&json!({ "spec": spec, "out": a.out, "samples": ds.len() }));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("--config {e}")))?,
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(seed) = env_seed(a.seed)? {
        cfg.seed = seed;
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("--data (or `data` in --config) is required"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| usage("--out (or `out` in --config) is required"))?;
    let dataset = Dataset::load(&data)?;
    fs::create_dir_all(&out).map_err(|e| Failure::Data(format!("--out {}: {e}", out.display())))?;

    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Failure::Data(format!("{}: {e}", log_path.display())))?;
    let mut log_error = None;
    let result = trainer::train_with_log(cfg.session(), &dataset, exec(a.sequential), |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(Failure::Data(format!("{}: {e}", log_path.display())));
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, step, last_good }) => {
            last_good.save(&ckpt_path)?;
            return Err(Failure::Data(format!(
                "training diverged at epoch {epoch}, step {step}; last good checkpoint (epoch {}) written to {}",
                last_good.epoch,
                ckpt_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(&ckpt_path)?;
    let resolved = RunConfig {
        data: Some(data),
        out: Some(out.clone()),
        ..RunConfig::from_session(&outcome.checkpoint.config)
    };
    let config_json = serde_json::to_string_pretty(&resolved).expect("config serializes");
    write_file(&out.join(CONFIG_FILE), config_json.as_bytes())?;
    emit(&json!({
        "config": resolved,
        "checkpoint": ckpt_path,
        "log": log_path,
        "epochs": outcome.log.len(),
        "final": outcome.log.last(),
    }));
    Ok(())
}

fn echo(ck: &Checkpoint) -> RunConfig {
    RunConfig::from_session(&ck.config)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.ckpt).map_err(|e| Failure::Data(format!("--ckpt {}: {e}", a.ckpt.display())))?;
    let ds = Dataset::load(&a.data)?;
    let report = evaluate(&ck, &ds.samples, a.frames, exec(a.sequential))?;
    emit(&json!({ "config": echo(&ck), "checkpoint": a.ckpt, "data": a.data, "report": report }));
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&a.mask_ratio) {
        return Err(usage(format!("--mask-ratio {} outside [0, 1)", a.mask_ratio)));
    }
    let encoder = match a.scale {
        Scale::Desk => EncoderConfig::desk(a.vocab_size),
        Scale::Paper => EncoderConfig::paper(),
    };
    let n = encoder.max_patches();
    let visible = n - masked_count(a.mask_ratio, n);
    let text_len = if a.text_len == 0 {
        encoder.max_text_len
    } else {
        a.text_len
    };
    let report = count_params_flops(&encoder, a.frames, visible, text_len).map_err(|e| usage(format!("flops: {e}")))?;
    let config = RunConfig::from_session(&SessionConfig {
        encoder,
        ..SessionConfig::desk()
    });
    emit(&json!({
        "config": config,
        "scale": match a.scale { Scale::Desk => "desk", Scale::Paper => "paper" },
        "mask_ratio": a.mask_ratio,
        "total_gflops": report.total_gflops(),
        "total_mparams": report.total_mparams(),
        "report": report,
    }));
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.ckpt).map_err(|e| Failure::Data(format!("--ckpt {}: {e}", a.ckpt.display())))?;
    let ds = Dataset::load(&a.data)?;
    let limit = if a.limit == 0 { ds.len() } else { a.limit.min(ds.len()) };
    let cfg = ProbeConfig {
        trials: a.trials,
        video_ratio: a.mask_ratio,
        text_ratio: a.text_ratio,
        strategy: a.strategy,
        frames: a.frames,
        seed: env_seed(Some(a.seed))?.unwrap_or(a.seed),
    };
    let report = similarity_probe(&ck, &ds.samples[..limit], &cfg, exec(a.sequential))?;
    emit(&json!({ "config": echo(&ck), "checkpoint": a.ckpt, "data": a.data, "report": report }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Probe(a) => cmd_probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

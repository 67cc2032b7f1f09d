//! Command-line front end for the cdasr pipeline.
//!
//! One JSON run config drives every subcommand; flags override file values
//! and the merged result is written into the run directory so any run can
//! be reproduced from its own artifacts. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or validation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdasr::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use cdasr::config::RunConfig;
use cdasr::dataset::{build_dataset, build_dataset_from_dirs, write_degraded_set, PairedDataset};
use cdasr::domain_gap::{export_embeddings_2d, write_coords_csv, write_mmd_matrix_csv};
use cdasr::encoder::{Encoder, EncoderSpec};
use cdasr::error::{Error, Result};
use cdasr::meta::{adapt, write_episode_log};
use cdasr::metrics::{evaluate_detailed, write_eval_csv, Protocol};
use cdasr::network::NetworkConfig;
use cdasr::trainer::{progress_line, train, write_train_log, StepRecord, TrainState};

/// Steps between periodic checkpoints inside a training run.
const CHECKPOINT_EVERY: u64 = 50;
/// Steps between progress lines on stdout.
const PROGRESS_EVERY: u64 = 10;

#[derive(Parser)]
#[command(
    name = "cdasr",
    version,
    about = "Semantic-feature-aligned super-resolution: degrade, train, adapt, eval, analyze"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bicubically downsample an HR directory into an X<scale> mirror tree
    Degrade(ConfigArgs),
    /// Train a model, from scratch or resumed from a checkpoint
    Train(ConfigArgs),
    /// Few-shot adapt a trained checkpoint to a target-domain directory
    Adapt(ConfigArgs),
    /// Evaluate a checkpoint on a paired dataset
    Eval(ConfigArgs),
    /// Embedding-space gap analysis across dataset directories
    AnalyzeDomains(AnalyzeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncoderChoice {
    Pretrained,
    Stub,
}

impl EncoderChoice {
    fn spec(self) -> EncoderSpec {
        match self {
            EncoderChoice::Pretrained => EncoderSpec::pretrained(),
            EncoderChoice::Stub => EncoderSpec::stub(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolChoice {
    /// Luma channel with a scale-pixel border crop (benchmark convention)
    Y,
    /// Full-RGB PSNR without cropping
    Rgb,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of high-resolution images
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    /// Directory of matching low-resolution images (synthesized when absent)
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    /// Upscaling factor (2, 4, 8 or 16)
    #[arg(long)]
    scale: Option<usize>,
    /// Output directory for this command's artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed overriding both the training and adaptation seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Semantic encoder backend
    #[arg(long, value_enum)]
    encoder: Option<EncoderChoice>,
    /// Adaptation episode count (0 re-emits the checkpoint unchanged)
    #[arg(long)]
    episodes: Option<usize>,
    /// Support pairs per adaptation episode
    #[arg(long)]
    shots: Option<usize>,
    /// Checkpoint to resume training from, adapt, or evaluate
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Evaluation protocol
    #[arg(long, value_enum)]
    protocol: Option<ProtocolChoice>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset directories to compare; tags are the directory names
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderChoice>,
}

/// Run config merged from file and flags, remembering whether the scale was
/// given explicitly (a checkpoint's scale wins over the default otherwise).
struct Resolved {
    cfg: RunConfig,
    explicit_scale: Option<usize>,
}

fn json_names_scale(bytes: &[u8]) -> bool {
    serde_json::from_slice::<serde_json::Value>(bytes)
        .ok()
        .and_then(|v| v.get("network").and_then(|n| n.get("scale")).cloned())
        .is_some()
}

fn resolve(args: &ConfigArgs) -> Result<Resolved> {
    let mut explicit_scale = args.scale;
    let mut cfg = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let cfg = RunConfig::from_json(&bytes)?;
            if explicit_scale.is_none() && json_names_scale(&bytes) {
                explicit_scale = Some(cfg.network.scale);
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &args.hr_dir {
        cfg.hr_dir = Some(d.clone());
    }
    if let Some(d) = &args.lr_dir {
        cfg.lr_dir = Some(d.clone());
    }
    if let Some(d) = &args.out {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(s) = args.scale {
        cfg.network.scale = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.adapt.seed = s;
    }
    if let Some(choice) = args.encoder {
        cfg.encoder = choice.spec();
    }
    if let Some(e) = args.episodes {
        cfg.adapt.episodes = e;
    }
    if let Some(s) = args.shots {
        cfg.adapt.shots = s;
    }
    Ok(Resolved {
        cfg,
        explicit_scale,
    })
}

fn require_dir(path: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::invalid(format!("{flag} is required")))?;
    if !path.is_dir() {
        return Err(Error::invalid(format!(
            "{flag} {}: not a directory",
            path.display()
        )));
    }
    Ok(path.clone())
}

fn require_out(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| Error::invalid("--out (or out_dir in the config) is required"))
}

fn require_resume(args: &ConfigArgs, purpose: &str) -> Result<PathBuf> {
    args.resume
        .clone()
        .ok_or_else(|| Error::invalid(format!("--resume pointing at {purpose} is required")))
}

fn make_run_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_resolved_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join("config.resolved.json"), &cfg.to_json_pretty())
}

/// Enforces that an explicitly requested scale matches the checkpoint; when
/// no scale was given the checkpoint's network configuration is adopted.
fn checkpoint_network(resolved: &Resolved, ckpt: &Checkpoint) -> Result<NetworkConfig> {
    if let Some(scale) = resolved.explicit_scale {
        if scale != ckpt.meta.cfg.scale {
            return Err(Error::Config(format!(
                "config requests scale {scale} but the checkpoint was trained at scale {}",
                ckpt.meta.cfg.scale
            )));
        }
    }
    Ok(ckpt.meta.cfg.clone())
}

fn load_pairs(cfg: &RunConfig, scale: usize) -> Result<PairedDataset> {
    let hr = cfg
        .hr_dir
        .as_ref()
        .ok_or_else(|| Error::invalid("--hr-dir (or hr_dir in the config) is required"))?;
    if !hr.is_dir() {
        return Err(Error::invalid(format!(
            "--hr-dir {}: not a directory",
            hr.display()
        )));
    }
    let (ds, report) = match &cfg.lr_dir {
        Some(lr) => build_dataset_from_dirs(hr, lr, scale)?,
        None => build_dataset(hr, scale)?,
    };
    if report.skip_count() > 0 {
        log::warn!("skipped {} unusable files under {}", report.skip_count(), hr.display());
    }
    Ok(ds)
}

fn cmd_degrade(args: &ConfigArgs) -> Result<()> {
    let resolved = resolve(args)?;
    let hr = require_dir(resolved.cfg.hr_dir.as_ref(), "--hr-dir")?;
    let scale = resolved
        .explicit_scale
        .ok_or_else(|| Error::invalid("--scale is required"))?;
    let out = require_out(&resolved.cfg)?;
    make_run_dir(&out)?;
    let manifest = write_degraded_set(&hr, scale, &out)?;
    println!(
        "degraded {} images into {} (skipped {})",
        manifest.pairs.len(),
        out.join(format!("X{scale}")).display(),
        manifest.skip_count
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let resolved = resolve(args)?;
    let mut cfg = resolved.cfg.clone();
    let out = require_out(&cfg)?;

    let resume_state = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            cfg.network = checkpoint_network(&resolved, &ckpt)?;
            Some(TrainState::from_checkpoint(ckpt)?)
        }
        None => None,
    };
    cfg.network.validate()?;
    cfg.train.validate()?;
    cfg.encoder.validate()?;
    if cfg.encoder.embed_dim != cfg.network.clip_dim {
        return Err(Error::Config(format!(
            "encoder embed_dim {} does not match network clip_dim {}",
            cfg.encoder.embed_dim, cfg.network.clip_dim
        )));
    }

    let ds = load_pairs(&cfg, cfg.network.scale)?;
    let enc = Encoder::load(&cfg.encoder)?;
    make_run_dir(&out.join("checkpoints"))?;
    write_resolved_config(&out, &cfg)?;

    let steps_per_epoch = (ds.len() as u64).div_ceil(cfg.train.batch_size as u64);
    let total_steps = cfg.train.epochs as u64 * steps_per_epoch;
    let meta_for = |step: u64| CheckpointMeta {
        cfg: cfg.network.clone(),
        encoder_id: enc.encoder_id(),
        seed: cfg.train.seed,
        step,
        loss_weights: cfg.train.weights,
    };

    let ckpt_dir = out.join("checkpoints");
    let on_step = |rec: &StepRecord, params: &cdasr::network::ParameterSet, opt: &cdasr::optim::OptimizerState| {
        if rec.step % PROGRESS_EVERY == 0 || rec.step == total_steps {
            println!("{}", progress_line(rec));
        }
        if rec.step % CHECKPOINT_EVERY == 0 {
            save_checkpoint(
                &ckpt_dir.join(format!("step_{}", rec.step)),
                &meta_for(rec.step),
                params,
                Some(opt),
            )?;
        }
        Ok(())
    };

    let outcome = match train(&ds, &cfg.train, &cfg.network, &enc, resume_state, on_step) {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, Error::NonFiniteLoss { .. }) {
                let _ = write_text(&out.join("diagnostics.txt"), &format!("{e}\n"));
            }
            return Err(e);
        }
    };

    write_train_log(&out.join("train_log.csv"), &outcome.log)?;
    let final_step = outcome.opt.step_count();
    save_checkpoint(
        &out.join("final"),
        &meta_for(final_step),
        &outcome.params,
        Some(&outcome.opt),
    )?;
    println!(
        "trained {} steps; final checkpoint at {}",
        outcome.log.len(),
        out.join("final").display()
    );
    Ok(())
}

fn cmd_adapt(args: &ConfigArgs) -> Result<()> {
    let resolved = resolve(args)?;
    let cfg = &resolved.cfg;
    let out = require_out(cfg)?;
    let src = require_resume(args, "the source checkpoint")?;
    let ckpt = load_checkpoint(&src)?;
    let net_cfg = checkpoint_network(&resolved, &ckpt)?;
    make_run_dir(&out)?;

    if cfg.adapt.episodes == 0 {
        // zero episodes means no adaptation: re-emit the checkpoint as-is,
        // which the deterministic writer reproduces byte-for-byte
        save_checkpoint(&out.join("adapted"), &ckpt.meta, &ckpt.params, ckpt.opt.as_ref())?;
        write_resolved_config(&out, cfg)?;
        println!("0 episodes requested; checkpoint re-emitted unchanged");
        return Ok(());
    }

    cfg.encoder.validate()?;
    if cfg.encoder.embed_dim != net_cfg.clip_dim {
        return Err(Error::Config(format!(
            "encoder embed_dim {} does not match network clip_dim {}",
            cfg.encoder.embed_dim, net_cfg.clip_dim
        )));
    }
    let enc = Encoder::load(&cfg.encoder)?;
    if enc.encoder_id() != ckpt.meta.encoder_id {
        log::warn!(
            "adapting with encoder {} but the checkpoint was trained with {}",
            enc.encoder_id(),
            ckpt.meta.encoder_id
        );
    }
    let target = load_pairs(cfg, net_cfg.scale)?;
    write_resolved_config(&out, cfg)?;

    let outcome = adapt(&ckpt.params, &target, &cfg.adapt, &net_cfg, &enc)?;
    for rec in &outcome.log {
        println!(
            "episode {:>4}  support {:.4e} -> {:.4e}  query {:.4e}  mean_alpha {:.3e}",
            rec.episode,
            rec.support_loss_pre,
            rec.support_loss_post,
            rec.query_loss,
            rec.mean_alpha
        );
    }
    write_episode_log(&out.join("episode_log.csv"), &outcome.log)?;
    let meta = CheckpointMeta {
        cfg: net_cfg,
        encoder_id: enc.encoder_id(),
        seed: cfg.adapt.seed,
        step: ckpt.meta.step,
        loss_weights: cfg.adapt.weights,
    };
    save_checkpoint(&out.join("adapted"), &meta, &outcome.params, None)?;
    println!(
        "adapted over {} episodes; checkpoint at {}",
        outcome.log.len(),
        out.join("adapted").display()
    );
    Ok(())
}

fn cmd_eval(args: &ConfigArgs) -> Result<()> {
    let resolved = resolve(args)?;
    let cfg = &resolved.cfg;
    let out = require_out(cfg)?;
    let src = require_resume(args, "the checkpoint to evaluate")?;
    let ckpt = load_checkpoint(&src)?;
    let net_cfg = checkpoint_network(&resolved, &ckpt)?;

    cfg.encoder.validate()?;
    if cfg.encoder.embed_dim != net_cfg.clip_dim {
        return Err(Error::Config(format!(
            "encoder embed_dim {} does not match network clip_dim {}",
            cfg.encoder.embed_dim, net_cfg.clip_dim
        )));
    }
    let enc = Encoder::load(&cfg.encoder)?;
    let ds = load_pairs(cfg, net_cfg.scale)?;
    let protocol = match args.protocol.unwrap_or(ProtocolChoice::Y) {
        ProtocolChoice::Y => Protocol::YChannelCropped {
            scale: net_cfg.scale,
        },
        ProtocolChoice::Rgb => Protocol::RgbFull,
    };

    let (report, rows) = evaluate_detailed(&ckpt.params, &net_cfg, &enc, &ds, protocol)?;
    make_run_dir(&out)?;
    write_eval_csv(&out.join("eval.csv"), &rows, &report)?;
    println!(
        "PSNR {:.2} dB  SSIM {:.4}  over {} images",
        report.psnr_db, report.ssim, report.n_images
    );
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let out = args
        .out
        .clone()
        .ok_or_else(|| Error::invalid("--out is required"))?;
    let mut datasets = Vec::with_capacity(args.dirs.len());
    for dir in &args.dirs {
        if !dir.is_dir() {
            return Err(Error::invalid(format!(
                "{}: not a directory",
                dir.display()
            )));
        }
        let base = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string();
        // duplicate basenames get a positional suffix so tags stay unique
        let mut tag = base.clone();
        let mut k = 2;
        while datasets.iter().any(|(t, _)| *t == tag) {
            tag = format!("{base}_{k}");
            k += 1;
        }
        datasets.push((tag, dir.clone()));
    }
    let spec = args.encoder.unwrap_or(EncoderChoice::Stub).spec();
    let report = export_embeddings_2d(&datasets, &spec, args.seed.unwrap_or(0))?;

    make_run_dir(&out)?;
    let coords = report.coords_2d.as_deref().unwrap_or(&[]);
    write_coords_csv(&out.join("coords.csv"), coords)?;
    write_mmd_matrix_csv(&out.join("mmd_matrix.csv"), &report.tags, &report.mmd_matrix)?;
    for i in 0..report.tags.len() {
        for j in (i + 1)..report.tags.len() {
            println!(
                "mmd[{} vs {}] = {:.6}",
                report.tags[i], report.tags[j], report.mmd_matrix[i][j]
            );
        }
    }
    println!("reduction: {:?}, {} points", report.reduction, coords.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Degrade(args) => cmd_degrade(args),
        Command::Train(args) => cmd_train(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AnalyzeDomains(args) => cmd_analyze(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

//! Supervised source-domain training loop.
//!
//! Joint Adam optimization of the backbone, alignment module, and
//! reconstruction head against the weighted composite loss. Every batch is a
//! pure function of `(seed, step)`, so a loss trace can be reproduced exactly
//! and a run resumed from a checkpoint continues bit-for-bit as if it had
//! never stopped. The semantic encoder is frozen throughout; it is consulted
//! for conditioning embeddings and loss features but never updated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::PairedDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{total_loss_t, LossReport, LossWeights};
use crate::network::{bind, bind_frozen, forward_t, harvest_grads, init_network, NetworkConfig, ParameterSet};
use crate::optim::{optimizer_step, OptimizerState};
use crate::sampling::{derive_seed, sample_patch_batch};

/// Learning-rate schedule, stepped once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Constant learning rate.
    None,
    /// Halve the learning rate every `k` epochs.
    HalveEveryK(usize),
}

fn default_epochs() -> usize {
    1
}

fn default_batch_size() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_patch_size() -> usize {
    48
}

fn default_scheduler() -> Scheduler {
    Scheduler::HalveEveryK(200)
}

/// Source-domain training hyperparameters.
///
/// `epochs = 0` is tolerated as a degenerate run: no steps execute and the
/// initial parameters come back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Side length of sampled LR training crops.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_scheduler")]
    pub scheduler: Scheduler,
    /// Optional global-norm gradient clipping threshold.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Seeds both parameter initialization and batch sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            patch_size: default_patch_size(),
            scheduler: default_scheduler(),
            grad_clip: None,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.patch_size < 8 {
            return Err(Error::invalid(format!(
                "patch_size {} below the 8x8 network minimum",
                self.patch_size
            )));
        }
        if let Scheduler::HalveEveryK(k) = self.scheduler {
            if k == 0 {
                return Err(Error::invalid("scheduler period must be >= 1 epoch"));
            }
        }
        if let Some(thr) = self.grad_clip {
            if !thr.is_finite() || thr <= 0.0 {
                return Err(Error::invalid(format!(
                    "grad_clip must be finite and positive, got {thr}"
                )));
            }
        }
        self.weights.validate()
    }

    /// Learning rate in effect for a 1-based step index. Pure in the step
    /// number, so resumed runs recompute the same schedule.
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        let epoch = (step - 1) / steps_per_epoch.max(1);
        match self.scheduler {
            Scheduler::None => self.learning_rate,
            Scheduler::HalveEveryK(k) => {
                let halvings = epoch / k as u64;
                self.learning_rate * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
            }
        }
    }
}

/// Loss summary for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// Parameters plus optimizer moments carried across a resume boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterSet,
    pub opt: OptimizerState,
}

impl TrainState {
    /// Unpacks a loaded checkpoint for resumption. Checkpoints saved for
    /// inference omit the optimizer moments and cannot seed a resume.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<TrainState> {
        let opt = ckpt.opt.ok_or_else(|| {
            Error::invalid("checkpoint carries no optimizer state; cannot resume training from it")
        })?;
        Ok(TrainState {
            params: ckpt.params,
            opt,
        })
    }
}

/// Final model and the per-step loss log of the executed steps.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub opt: OptimizerState,
    pub log: Vec<StepRecord>,
}

/// Accumulates gradients of the batch-mean total loss into `params` and
/// returns the mean loss report.
///
/// The mean is a sum of per-pair losses scaled by `1/n`. Pairs are processed
/// in tape chunks of `chunk_size` so graph memory stays bounded; chunking
/// cannot change the result because gradient slots accumulate additively.
/// Existing gradients are cleared first.
pub fn batch_backward(
    params: &mut ParameterSet,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    pairs: &[(&Image, &Image)],
    w: &LossWeights,
    chunk_size: usize,
) -> Result<LossReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot take a gradient over an empty batch"));
    }
    params.zero_grads();
    let n = pairs.len() as f64;
    let mut agg = LossReport {
        total: 0.0,
        pixel: 0.0,
        perceptual: 0.0,
        semantic: 0.0,
    };
    for chunk in pairs.chunks(chunk_size.max(1)) {
        let mut t = Tape::new();
        let b = bind(&mut t, params);
        let mut chunk_total: Option<Var> = None;
        for (lr_img, hr_img) in chunk {
            // The conditioning embedding enters as a constant: no gradient
            // flows into the frozen encoder from this path.
            let emb = enc.encode(lr_img)?;
            let pred = forward_t(&mut t, &b, net_cfg, lr_img, &emb)?;
            let tl = total_loss_t(&mut t, enc, pred, hr_img, w)?;
            let scaled = t.scale(tl.total, 1.0 / n);
            chunk_total = Some(match chunk_total {
                Some(acc) => t.add(acc, scaled),
                None => scaled,
            });
            agg.total += tl.report.total / n;
            agg.pixel += tl.report.pixel / n;
            agg.perceptual += tl.report.perceptual / n;
            agg.semantic += tl.report.semantic / n;
        }
        let root = chunk_total.expect("chunk is non-empty");
        let grads = t.backward(root);
        harvest_grads(&grads, &b, params);
    }
    Ok(agg)
}

/// Mean loss report over a batch with frozen parameters; no gradients.
pub fn batch_loss(
    params: &ParameterSet,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    pairs: &[(&Image, &Image)],
    w: &LossWeights,
) -> Result<LossReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate the loss of an empty batch"));
    }
    let n = pairs.len() as f64;
    let mut agg = LossReport {
        total: 0.0,
        pixel: 0.0,
        perceptual: 0.0,
        semantic: 0.0,
    };
    for (lr_img, hr_img) in pairs {
        let mut t = Tape::new();
        let b = bind_frozen(&mut t, params);
        let emb = enc.encode(lr_img)?;
        let pred = forward_t(&mut t, &b, net_cfg, lr_img, &emb)?;
        let tl = total_loss_t(&mut t, enc, pred, hr_img, w)?;
        agg.total += tl.report.total / n;
        agg.pixel += tl.report.pixel / n;
        agg.perceptual += tl.report.perceptual / n;
        agg.semantic += tl.report.semantic / n;
    }
    Ok(agg)
}

/// Scales all gradients so their joint Euclidean norm is at most
/// `threshold`. Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParameterSet, threshold: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for (_, p) in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * factor);
        }
    }
    norm
}

/// Runs the training loop.
///
/// Fresh runs initialize the network from `cfg.seed`; passing `resume`
/// continues from that state instead, with the step count carried by the
/// optimizer. The target step count is `epochs * ceil(|dataset| / batch)`;
/// if the resumed state already meets it, no steps execute. `on_step` fires
/// after each optimizer step with the record and the updated state, letting
/// callers print progress or write periodic checkpoints; an error from it
/// aborts the run.
pub fn train(
    ds: &PairedDataset,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(&StepRecord, &ParameterSet, &OptimizerState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if ds.pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    if ds.scale != net_cfg.scale {
        return Err(Error::invalid(format!(
            "dataset is a x{} set but the network is configured for x{}",
            ds.scale, net_cfg.scale
        )));
    }
    if enc.embed_dim() != net_cfg.clip_dim {
        return Err(Error::invalid(format!(
            "encoder embedding dim {} does not match clip_dim {}",
            enc.embed_dim(),
            net_cfg.clip_dim
        )));
    }

    let (mut params, mut opt) = match resume {
        Some(state) => (state.params, state.opt),
        None => {
            let p = init_network(net_cfg, cfg.seed)?;
            let o = OptimizerState::new(&p);
            (p, o)
        }
    };

    let steps_per_epoch = (ds.pairs.len() as u64).div_ceil(cfg.batch_size as u64);
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut log = Vec::new();

    while opt.step_count() < total_steps {
        let step = opt.step_count() + 1;
        let lr = cfg.lr_at(step, steps_per_epoch);
        let batch_seed = derive_seed(cfg.seed, step);
        let batch = sample_patch_batch(ds, cfg.patch_size, cfg.batch_size, batch_seed)?;
        let pairs: Vec<(&Image, &Image)> = batch
            .iter()
            .map(|s| (&s.lr_patch, &s.hr_patch))
            .collect();
        let report = batch_backward(&mut params, net_cfg, enc, &pairs, &cfg.weights, pairs.len())?;
        if !report.is_finite() {
            let indices: Vec<usize> = batch.iter().map(|s| s.pair_index).collect();
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                detail: format!(
                    "batch pair indices {:?}; pixel {:e}, perceptual {:e}, semantic {:e}",
                    indices, report.pixel, report.perceptual, report.semantic
                ),
            });
        }
        if let Some(thr) = cfg.grad_clip {
            clip_global_norm(&mut params, thr);
        }
        optimizer_step(&mut params, &mut opt, lr)?;
        params.zero_grads();
        let rec = StepRecord { step, lr, report };
        on_step(&rec, &params, &opt)?;
        log.push(rec);
    }

    Ok(TrainOutcome { params, opt, log })
}

/// Single-line progress summary for one step.
pub fn progress_line(rec: &StepRecord) -> String {
    format!(
        "step {:>6}  lr {:.3e}  total {:.6e}  pixel {:.6e}  perceptual {:.6e}  semantic {:.6e}",
        rec.step, rec.lr, rec.report.total, rec.report.pixel, rec.report.perceptual, rec.report.semantic
    )
}

/// One row of the training-loss CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub semantic: f64,
}

impl From<&StepRecord> for TrainLogRow {
    fn from(rec: &StepRecord) -> Self {
        TrainLogRow {
            step: rec.step,
            total: rec.report.total,
            pixel: rec.report.pixel,
            perceptual: rec.report.perceptual,
            semantic: rec.report.semantic,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes the loss log as `step,total,pixel,perceptual,semantic` rows.
pub fn write_train_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for rec in log {
        w.serialize(TrainLogRow::from(rec))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads a loss log written by [`write_train_log`].
pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

//! Few-shot domain adaptation via episodic meta-learning.
//!
//! Each episode samples a disjoint support/query split from the target
//! domain, takes inner gradient steps on the support set with learned
//! per-scalar step sizes alpha, and then updates the meta-learner from the
//! query loss. Two outer modes are supported: first-order MAML, which learns
//! alpha while keeping the base parameters fixed, and Reptile, which keeps
//! alpha fixed and moves the base parameters toward the adapted ones.
//!
//! The first-order alpha gradient drops the second-order terms of the exact
//! meta-objective: with one inner step `theta' = theta - alpha * g_s`, the
//! derivative of the query loss with respect to alpha is `-g_s * g_q` up to
//! curvature terms, which desk-scale memory cannot afford to keep.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossWeights;
use crate::network::{NetworkConfig, ParameterSet};
use crate::sampling::{derive_seed, sample_episode};
use crate::trainer::{batch_backward, batch_loss};

/// Upper clamp for learned per-parameter step sizes. Unbounded learned
/// rates destabilize the inner update trivially.
pub const ALPHA_MAX: f64 = 1e-2;

/// Outer-loop algorithm choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    MamlFirstOrder,
    Reptile,
}

/// Learned per-scalar step sizes plus the outer-loop rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerState {
    /// One array per parameter, same shape, elementwise step sizes in
    /// `[0, ALPHA_MAX]`.
    pub alphas: BTreeMap<String, ArrayD<f64>>,
    /// Outer-loop rate: scales the alpha update in first-order MAML and the
    /// interpolation toward adapted parameters in Reptile.
    pub gamma: f64,
    pub mode: MetaMode,
}

impl MetaLearnerState {
    pub fn new(params: &ParameterSet, alpha_init: f64, gamma: f64, mode: MetaMode) -> Result<Self> {
        if !alpha_init.is_finite() || alpha_init < 0.0 {
            return Err(Error::invalid(format!(
                "alpha_init must be finite and non-negative, got {alpha_init}"
            )));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::invalid(format!(
                "gamma must be finite and non-negative, got {gamma}"
            )));
        }
        let a0 = alpha_init.min(ALPHA_MAX);
        let alphas = params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    ArrayD::from_elem(p.value.shape().to_vec(), a0),
                )
            })
            .collect();
        Ok(MetaLearnerState {
            alphas,
            gamma,
            mode,
        })
    }

    /// Checks that the alphas cover exactly the parameter names with
    /// matching shapes.
    pub fn validate_against(&self, params: &ParameterSet) -> Result<()> {
        if self.alphas.len() != params.len() {
            return Err(Error::invalid(format!(
                "meta state covers {} parameters, network has {}",
                self.alphas.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            let a = self.alphas.get(name).ok_or_else(|| {
                Error::invalid(format!("meta state is missing alphas for `{name}`"))
            })?;
            if a.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    name: format!("alpha.{name}"),
                    expected: p.value.shape().to_vec(),
                    found: a.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Mean step size over every scalar, for episode logging.
    pub fn mean_alpha(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for a in self.alphas.values() {
            sum += a.sum();
            n += a.len();
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

fn default_shots() -> usize {
    5
}

fn default_query_size() -> usize {
    5
}

fn default_inner_steps() -> usize {
    1
}

fn default_alpha_init() -> f64 {
    1e-4
}

fn default_gamma() -> f64 {
    1e-5
}

fn default_adapt_batch() -> usize {
    4
}

fn default_mode() -> MetaMode {
    MetaMode::MamlFirstOrder
}

fn default_episodes() -> usize {
    1
}

/// Adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_query_size")]
    pub query_size: usize,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Pairs per gradient-evaluation chunk, bounding tape memory.
    #[serde(default = "default_adapt_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: MetaMode,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, n) in [
            ("episodes", self.episodes),
            ("shots", self.shots),
            ("query_size", self.query_size),
            ("inner_steps", self.inner_steps),
            ("batch_size", self.batch_size),
        ] {
            if n == 0 {
                return Err(Error::invalid(format!("{what} must be >= 1")));
            }
        }
        // zero rates are legal (they make adaptation the identity); only
        // negative or non-finite rates are rejected
        for (what, r) in [("alpha_init", self.alpha_init), ("gamma", self.gamma)] {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::invalid(format!(
                    "{what} must be finite and non-negative, got {r}"
                )));
            }
        }
        self.weights.validate()
    }
}

/// Elementwise inner update of the Eq. 10 form: `value - alpha * grad`.
pub fn apply_inner_step(
    value: &ArrayD<f64>,
    alpha: &ArrayD<f64>,
    grad: &ArrayD<f64>,
) -> ArrayD<f64> {
    let mut out = value.clone();
    ndarray::Zip::from(&mut out)
        .and(alpha)
        .and(grad)
        .for_each(|v, &a, &g| *v -= a * g);
    out
}

/// First-order alpha update: `clamp(alpha - gamma * (-g_support * g_query),
/// 0, alpha_max)`, elementwise.
pub fn alpha_update(
    alpha: &ArrayD<f64>,
    gamma: f64,
    g_support: &ArrayD<f64>,
    g_query: &ArrayD<f64>,
    alpha_max: f64,
) -> ArrayD<f64> {
    let mut out = alpha.clone();
    ndarray::Zip::from(&mut out)
        .and(g_support)
        .and(g_query)
        .for_each(|a, &gs, &gq| {
            *a = (*a + gamma * gs * gq).clamp(0.0, alpha_max);
        });
    out
}

fn ensure_finite_grads(params: &ParameterSet) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    Ok(())
}

/// Computes support-set gradients into a clone of `params` and returns it.
fn with_support_grads(
    params: &ParameterSet,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    pairs: &[(&Image, &Image)],
    w: &LossWeights,
    chunk_size: usize,
) -> Result<ParameterSet> {
    let mut holder = params.clone();
    batch_backward(&mut holder, net_cfg, enc, pairs, w, chunk_size)?;
    ensure_finite_grads(&holder)?;
    Ok(holder)
}

/// Inner adaptation of Eq. 10: `inner_steps` plain gradient steps on the
/// support loss with the per-scalar step sizes from `state`. Functional:
/// the input parameters are untouched and a new set is returned.
pub fn inner_adapt(
    params: &ParameterSet,
    state: &MetaLearnerState,
    support: &[(&Image, &Image)],
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    w: &LossWeights,
    inner_steps: usize,
    chunk_size: usize,
) -> Result<ParameterSet> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    state.validate_against(params)?;
    let mut cur = params.clone();
    for _ in 0..inner_steps.max(1) {
        batch_backward(&mut cur, net_cfg, enc, support, w, chunk_size)?;
        ensure_finite_grads(&cur)?;
        let names: Vec<String> = cur.names().map(str::to_owned).collect();
        for name in &names {
            let grad = cur.grad(name).clone();
            let stepped = apply_inner_step(cur.get(name), &state.alphas[name], &grad);
            cur.set(name, stepped)?;
        }
        cur.zero_grads();
    }
    Ok(cur)
}

/// Outer meta-update of Eq. 11.
///
/// In `maml_first_order` mode the base parameters stay fixed and the alphas
/// move along the first-order estimate of the query-loss gradient. In
/// `reptile` mode the alphas stay fixed and the base parameters move toward
/// the adapted ones by the fraction `gamma`.
pub fn meta_update(
    state: &MetaLearnerState,
    params: &mut ParameterSet,
    adapted: &ParameterSet,
    support: &[(&Image, &Image)],
    query: &[(&Image, &Image)],
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    w: &LossWeights,
    chunk_size: usize,
) -> Result<MetaLearnerState> {
    if support.is_empty() || query.is_empty() {
        return Err(Error::invalid("support and query sets must be non-empty"));
    }
    state.validate_against(params)?;
    state.validate_against(adapted)?;
    match state.mode {
        MetaMode::MamlFirstOrder => {
            let sg = with_support_grads(params, net_cfg, enc, support, w, chunk_size)?;
            let qg = with_support_grads(adapted, net_cfg, enc, query, w, chunk_size)?;
            let mut next = state.clone();
            for (name, alpha) in next.alphas.iter_mut() {
                *alpha = alpha_update(alpha, state.gamma, sg.grad(name), qg.grad(name), ALPHA_MAX);
            }
            Ok(next)
        }
        MetaMode::Reptile => {
            let frac = state.gamma;
            let names: Vec<String> = params.names().map(str::to_owned).collect();
            for name in &names {
                let target = adapted.get(name).clone();
                let v = params.get_mut(name);
                ndarray::Zip::from(&mut *v)
                    .and(&target)
                    .for_each(|old, &new| *old += frac * (new - *old));
            }
            Ok(state.clone())
        }
    }
}

/// One row of the adaptation episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub support_loss_pre: f64,
    pub support_loss_post: f64,
    pub query_loss: f64,
    pub mean_alpha: f64,
}

/// Final adapted parameters plus the meta-learner and the episode log.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: ParameterSet,
    pub state: MetaLearnerState,
    pub log: Vec<EpisodeRecord>,
}

/// Runs the episodic adaptation loop and returns the parameters adapted in
/// the final episode.
///
/// Episode `k` samples its support/query split with a seed derived from
/// `(cfg.seed, k)`, so the whole run is a pure function of the config.
pub fn adapt(
    params: &ParameterSet,
    target_ds: &PairedDataset,
    cfg: &AdaptConfig,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if target_ds.pairs.len() < cfg.shots + cfg.query_size {
        return Err(Error::invalid(format!(
            "target dataset has {} pairs, need at least shots {} + query_size {}",
            target_ds.pairs.len(),
            cfg.shots,
            cfg.query_size
        )));
    }
    if target_ds.scale != net_cfg.scale {
        return Err(Error::invalid(format!(
            "target dataset is a x{} set but the network is configured for x{}",
            target_ds.scale, net_cfg.scale
        )));
    }
    if enc.embed_dim() != net_cfg.clip_dim {
        return Err(Error::invalid(format!(
            "encoder embedding dim {} does not match clip_dim {}",
            enc.embed_dim(),
            net_cfg.clip_dim
        )));
    }

    let mut state = MetaLearnerState::new(params, cfg.alpha_init, cfg.gamma, cfg.mode)?;
    let mut theta = params.clone();
    let mut last_adapted = params.clone();
    let mut log = Vec::with_capacity(cfg.episodes);

    for ep in 1..=cfg.episodes as u64 {
        let split = sample_episode(target_ds, cfg.shots, cfg.query_size, derive_seed(cfg.seed, ep))?;
        let support: Vec<(&Image, &Image)> = split
            .support_pairs(target_ds)
            .iter()
            .map(|p| (&p.lr, &p.hr))
            .collect();
        let query: Vec<(&Image, &Image)> = split
            .query_pairs(target_ds)
            .iter()
            .map(|p| (&p.lr, &p.hr))
            .collect();

        let pre = batch_loss(&theta, net_cfg, enc, &support, &cfg.weights)?;
        let adapted = inner_adapt(
            &theta,
            &state,
            &support,
            net_cfg,
            enc,
            &cfg.weights,
            cfg.inner_steps,
            cfg.batch_size,
        )?;
        let post = batch_loss(&adapted, net_cfg, enc, &support, &cfg.weights)?;
        let qloss = batch_loss(&adapted, net_cfg, enc, &query, &cfg.weights)?;
        if !qloss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: ep as usize,
                detail: format!(
                    "episode query loss diverged: total {:e}, support pairs {:?}",
                    qloss.total, split.support
                ),
            });
        }
        state = meta_update(
            &state,
            &mut theta,
            &adapted,
            &support,
            &query,
            net_cfg,
            enc,
            &cfg.weights,
            cfg.batch_size,
        )?;
        log.push(EpisodeRecord {
            episode: ep,
            support_loss_pre: pre.total,
            support_loss_post: post.total,
            query_loss: qloss.total,
            mean_alpha: state.mean_alpha(),
        });
        last_adapted = adapted;
    }

    Ok(AdaptOutcome {
        params: last_adapted,
        state,
        log,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes the episode log as
/// `episode,support_loss_pre,support_loss_post,query_loss,mean_alpha` rows.
pub fn write_episode_log(path: &Path, log: &[EpisodeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for rec in log {
        w.serialize(rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads an episode log written by [`write_episode_log`].
pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

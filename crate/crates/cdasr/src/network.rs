//! The super-resolution network: backbone F, semantic alignment branch G,
//! and scale-aware reconstruction R, composed into one differentiable map.
//!
//! Parameters live in a [`ParameterSet`] keyed by stable names. Forward
//! passes run on the autodiff [`Tape`]; thin wrappers execute the same
//! graph with frozen parameters for evaluation and tests.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::encoder::SemanticEmbedding;
use crate::error::{Error, Result};
use crate::image::{chw_to_hwc, hwc_to_chw, ColorSpace, Image};

fn default_backbone_channels() -> usize {
    64
}
fn default_backbone_blocks() -> usize {
    8
}
fn default_clip_dim() -> usize {
    512
}
fn default_mlp_hidden() -> usize {
    1024
}
fn default_mlp_out() -> usize {
    512
}
fn default_recon_blocks() -> usize {
    2
}

fn default_scale() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_backbone_channels")]
    pub backbone_channels: usize,
    #[serde(default = "default_backbone_blocks")]
    pub backbone_blocks: usize,
    /// Semantic embedding dimension c accepted by the alignment MLP.
    #[serde(default = "default_clip_dim")]
    pub clip_dim: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_mlp_out")]
    pub mlp_out: usize,
    /// Residual blocks inserted between upsampling stages at x8 and x16.
    #[serde(default = "default_recon_blocks")]
    pub recon_blocks_per_stage: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::with_scale(default_scale())
    }
}

impl NetworkConfig {
    pub fn with_scale(scale: usize) -> Self {
        NetworkConfig {
            scale,
            backbone_channels: default_backbone_channels(),
            backbone_blocks: default_backbone_blocks(),
            clip_dim: default_clip_dim(),
            mlp_hidden: default_mlp_hidden(),
            mlp_out: default_mlp_out(),
            recon_blocks_per_stage: default_recon_blocks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::resample::check_scale(self.scale)?;
        for (name, v) in [
            ("backbone_channels", self.backbone_channels),
            ("backbone_blocks", self.backbone_blocks),
            ("clip_dim", self.clip_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_out", self.mlp_out),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        // engineering caps so configs from untrusted files cannot demand
        // absurd allocations
        for (name, v, max) in [
            ("backbone_channels", self.backbone_channels, 65_536),
            ("backbone_blocks", self.backbone_blocks, 4_096),
            ("clip_dim", self.clip_dim, 65_536),
            ("mlp_hidden", self.mlp_hidden, 65_536),
            ("mlp_out", self.mlp_out, 65_536),
            ("recon_blocks_per_stage", self.recon_blocks_per_stage, 4_096),
        ] {
            if v > max {
                return Err(Error::invalid(format!("{name} {v} exceeds the cap {max}")));
            }
        }
        Ok(())
    }

    pub fn upsample_stages(&self) -> usize {
        (self.scale as f64).log2().round() as usize
    }

    /// Gaps between consecutive upsampling stages that receive residual
    /// blocks (x8 and x16 only).
    pub fn recon_gaps(&self) -> usize {
        if self.scale >= 8 {
            self.upsample_stages() - 1
        } else {
            0
        }
    }
}

/// Closed-form count of named parameter entries implied by a config.
pub fn expected_parameter_count(cfg: &NetworkConfig) -> usize {
    let backbone = 2 + 4 * cfg.backbone_blocks + 2;
    let align = 4 + 2 + 4 + 2;
    let recon = 4 * cfg.upsample_stages() + 4 * cfg.recon_gaps() * cfg.recon_blocks_per_stage + 2;
    backbone + align + recon
}

/// One named parameter with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

/// All trainable parameters, in stable name order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let grad = ArrayD::zeros(value.raw_dim());
        let prev = self.entries.insert(name.to_string(), Param { value, grad });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    /// Replace a value, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: slot.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Accumulate a gradient into a parameter's slot.
    pub fn add_grad(&mut self, name: &str, delta: &ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        slot.grad += delta;
    }

    pub fn max_abs_value_diff(&self, other: &ParameterSet) -> f64 {
        let mut m = 0.0f64;
        for (name, p) in self.iter() {
            let q = other.get(name);
            for (a, b) in p.value.iter().zip(q.iter()) {
                m = m.max((a - b).abs());
            }
        }
        m
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }
}

/// Register every parameter as a differentiable leaf.
pub fn bind(t: &mut Tape, params: &ParameterSet) -> TapeBinding {
    let vars = params
        .iter()
        .map(|(name, p)| (name.to_string(), t.leaf(p.value.clone())))
        .collect();
    TapeBinding { vars }
}

/// Register every parameter as a frozen constant (no gradients).
pub fn bind_frozen(t: &mut Tape, params: &ParameterSet) -> TapeBinding {
    let vars = params
        .iter()
        .map(|(name, p)| (name.to_string(), t.constant(p.value.clone())))
        .collect();
    TapeBinding { vars }
}

/// Accumulate tape gradients back into the parameter slots.
pub fn harvest_grads(
    grads: &Gradients,
    binding: &TapeBinding,
    params: &mut ParameterSet,
) {
    for (name, var) in binding.vars.iter() {
        if let Some(g) = grads.get(*var) {
            params.add_grad(name, g);
        }
    }
}

/// Spatial feature tensor `(channels, H, W)` produced by the backbone and
/// alignment branches.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub channels: usize,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite feature map"));
        }
        let channels = values.dim().0;
        Ok(FeatureMap { values, channels })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.gen_range(-bound..bound))
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

/// Initializer class of one parameter entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Names, shapes and initializer classes of every parameter implied by a
/// config, in initialization order. Single source of truth for the network
/// structure: `init_network` realizes it and checkpoint loading validates
/// against it without allocating any array data.
pub fn parameter_layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let c = cfg.backbone_channels;
    let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, co: usize, ci: usize, k: usize| {
        let fan_in = ci * k * k;
        out.push((format!("{name}.w"), vec![co, ci, k, k], InitKind::Kaiming { fan_in }));
        out.push((format!("{name}.b"), vec![co], InitKind::Zeros));
    };
    let zero_conv = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, co: usize, ci: usize, k: usize| {
        out.push((format!("{name}.w"), vec![co, ci, k, k], InitKind::Zeros));
        out.push((format!("{name}.b"), vec![co], InitKind::Zeros));
    };

    // backbone: head, residual blocks, tail with long skip
    conv(&mut out, "backbone.head", c, 3, 3);
    for i in 0..cfg.backbone_blocks {
        conv(&mut out, &format!("backbone.block{i:02}.conv1"), c, c, 3);
        zero_conv(&mut out, &format!("backbone.block{i:02}.conv2"), c, c, 3);
    }
    conv(&mut out, "backbone.tail", c, c, 3);

    // alignment branch: MLP, layer norm, spatial convs, fusion
    out.push((
        "align.mlp.w1".into(),
        vec![cfg.mlp_hidden, cfg.clip_dim],
        InitKind::Kaiming { fan_in: cfg.clip_dim },
    ));
    out.push(("align.mlp.b1".into(), vec![cfg.mlp_hidden], InitKind::Zeros));
    out.push((
        "align.mlp.w2".into(),
        vec![cfg.mlp_out, cfg.mlp_hidden],
        InitKind::Kaiming { fan_in: cfg.mlp_hidden },
    ));
    out.push(("align.mlp.b2".into(), vec![cfg.mlp_out], InitKind::Zeros));
    out.push(("align.ln.gamma".into(), vec![cfg.mlp_out], InitKind::Ones));
    out.push(("align.ln.beta".into(), vec![cfg.mlp_out], InitKind::Zeros));
    conv(&mut out, "align.spatial.conv1", c, cfg.mlp_out, 3);
    conv(&mut out, "align.spatial.conv2", c, c, 3);
    zero_conv(&mut out, "align.fusion", c, 2 * c, 1);

    // reconstruction: pixel-shuffle cascade with optional gap blocks
    let stages = cfg.upsample_stages();
    for i in 0..stages {
        conv(&mut out, &format!("recon.stage{i}.expand"), 4 * c, c, 3);
        conv(&mut out, &format!("recon.stage{i}.post"), c, c, 3);
        if cfg.recon_gaps() > 0 && i + 1 < stages {
            for j in 0..cfg.recon_blocks_per_stage {
                conv(&mut out, &format!("recon.gap{i}.block{j}.conv1"), c, c, 3);
                zero_conv(&mut out, &format!("recon.gap{i}.block{j}.conv2"), c, c, 3);
            }
        }
    }
    zero_conv(&mut out, "recon.final", 3, c, 3);
    out
}

/// Initialize all parameters: Kaiming-uniform convolution and dense
/// weights, zero biases, and zero weights on every residual tail (second
/// block convolutions, the fusion convolution, and the final reconstruction
/// convolution) so a fresh network computes plain bicubic upsampling.
pub fn init_network(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, shape, kind) in parameter_layout(cfg) {
        let value = match kind {
            InitKind::Kaiming { fan_in } => kaiming_uniform(&mut rng, &shape, fan_in),
            InitKind::Zeros => zeros(&shape),
            InitKind::Ones => ArrayD::ones(ndarray::IxDyn(&shape)),
        };
        p.insert(&name, value);
    }
    debug_assert_eq!(p.len(), expected_parameter_count(cfg));
    Ok(p)
}

fn conv_t(t: &mut Tape, b: &TapeBinding, name: &str, x: Var) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    t.conv2d(x, w, bias)
}

fn res_block_t(t: &mut Tape, b: &TapeBinding, prefix: &str, x: Var) -> Var {
    let a = conv_t(t, b, &format!("{prefix}.conv1"), x);
    let r = t.relu(a);
    let y = conv_t(t, b, &format!("{prefix}.conv2"), r);
    t.add(x, y)
}

/// Backbone F: head conv, residual blocks, tail conv plus long skip.
pub fn backbone_forward_t(t: &mut Tape, b: &TapeBinding, cfg: &NetworkConfig, x: Var) -> Var {
    let head = conv_t(t, b, "backbone.head", x);
    let mut f = head;
    for i in 0..cfg.backbone_blocks {
        f = res_block_t(t, b, &format!("backbone.block{i:02}"), f);
    }
    let tail = conv_t(t, b, "backbone.tail", f);
    t.add(tail, head)
}

/// Eq. 3: f_proc = ReLU(W2 ReLU(W1 f + b1) + b2).
pub fn clip_feature_processor_t(t: &mut Tape, b: &TapeBinding, emb: Var) -> Var {
    let w1 = b.var("align.mlp.w1");
    let b1 = b.var("align.mlp.b1");
    let w2 = b.var("align.mlp.w2");
    let b2 = b.var("align.mlp.b2");
    let h = t.linear_vec(w1, emb, b1);
    let h = t.relu(h);
    let o = t.linear_vec(w2, h, b2);
    t.relu(o)
}

/// Eq. 4: layer-normalize f_proc, broadcast it spatially, and refine with
/// two 3x3 convolutions down to backbone width.
pub fn spatial_feature_generator_t(
    t: &mut Tape,
    b: &TapeBinding,
    f_proc: Var,
    h: usize,
    w: usize,
) -> Var {
    let gamma = b.var("align.ln.gamma");
    let beta = b.var("align.ln.beta");
    let normed = t.layer_norm_vec(f_proc, gamma, beta, 1e-5);
    let map = t.broadcast_to_map(normed, h, w);
    let c1 = conv_t(t, b, "align.spatial.conv1", map);
    let r = t.relu(c1);
    conv_t(t, b, "align.spatial.conv2", r)
}

/// Eq. 5: f_aligned = Conv_fusion(concat(sr, spatial)) + sr.
pub fn fuse_t(t: &mut Tape, b: &TapeBinding, sr: Var, spatial: Var) -> Var {
    let cat = t.concat_channels(&[sr, spatial]);
    let f = conv_t(t, b, "align.fusion", cat);
    t.add(f, sr)
}

/// Reconstruction R: pixel-shuffle cascade, gap residual blocks for x8 and
/// x16, final projection to RGB, plus the global bicubic residual.
pub fn reconstruct_t(
    t: &mut Tape,
    b: &TapeBinding,
    cfg: &NetworkConfig,
    aligned: Var,
    lr_img: &Image,
) -> Result<Var> {
    let up = crate::resample::bicubic_upsample(lr_img, cfg.scale)?;
    let up_chw = hwc_to_chw(&up.to_rgb().pixels);
    let up_v = t.constant(up_chw.into_dyn());
    let stages = cfg.upsample_stages();
    let mut x = aligned;
    for i in 0..stages {
        x = conv_t(t, b, &format!("recon.stage{i}.expand"), x);
        x = t.pixel_shuffle(x, 2);
        x = conv_t(t, b, &format!("recon.stage{i}.post"), x);
        if cfg.recon_gaps() > 0 && i + 1 < stages {
            for j in 0..cfg.recon_blocks_per_stage {
                x = res_block_t(t, b, &format!("recon.gap{i}.block{j}"), x);
            }
        }
    }
    let delta = conv_t(t, b, "recon.final", x);
    Ok(t.add(delta, up_v))
}

/// Full differentiable forward pass. The LR image and embedding enter as
/// constants; the result is the unclamped RGB prediction `(3, sH, sW)`.
pub fn forward_t(
    t: &mut Tape,
    b: &TapeBinding,
    cfg: &NetworkConfig,
    lr_img: &Image,
    emb: &SemanticEmbedding,
) -> Result<Var> {
    if emb.dim() != cfg.clip_dim {
        return Err(Error::invalid(format!(
            "embedding dimension {} does not match clip_dim {}",
            emb.dim(),
            cfg.clip_dim
        )));
    }
    let rgb = lr_img.to_rgb();
    if rgb.height() < 8 || rgb.width() < 8 {
        return Err(Error::invalid(format!(
            "LR input {}x{} below the 8x8 minimum",
            rgb.height(),
            rgb.width()
        )));
    }
    let x = t.constant(hwc_to_chw(&rgb.pixels).into_dyn());
    let e = t.constant(emb.values.clone().into_dyn());
    let feats = backbone_forward_t(t, b, cfg, x);
    let f_proc = clip_feature_processor_t(t, b, e);
    let (h, w) = (rgb.height(), rgb.width());
    let spatial = spatial_feature_generator_t(t, b, f_proc, h, w);
    let aligned = fuse_t(t, b, feats, spatial);
    reconstruct_t(t, b, cfg, aligned, &rgb)
}

// ---- frozen-parameter wrappers ----

fn var_to_feature(t: &Tape, v: Var) -> Result<FeatureMap> {
    let arr: Array3<f64> = t
        .value(v)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::invalid(format!("expected 3-d feature: {e}")))?;
    FeatureMap::new(arr)
}

pub fn backbone_forward(
    params: &ParameterSet,
    cfg: &NetworkConfig,
    lr_img: &Image,
) -> Result<FeatureMap> {
    let rgb = lr_img.to_rgb();
    if rgb.height() < 8 || rgb.width() < 8 {
        return Err(Error::invalid("backbone input below 8x8"));
    }
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let x = t.constant(hwc_to_chw(&rgb.pixels).into_dyn());
    let f = backbone_forward_t(&mut t, &b, cfg, x);
    var_to_feature(&t, f)
}

pub fn clip_feature_processor(
    params: &ParameterSet,
    cfg: &NetworkConfig,
    emb: &SemanticEmbedding,
) -> Result<Array1<f64>> {
    if emb.dim() != cfg.clip_dim {
        return Err(Error::invalid(format!(
            "embedding dimension {} does not match clip_dim {}",
            emb.dim(),
            cfg.clip_dim
        )));
    }
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let e = t.constant(emb.values.clone().into_dyn());
    let f = clip_feature_processor_t(&mut t, &b, e);
    Ok(t.value(f).clone().into_dimensionality().unwrap())
}

pub fn spatial_feature_generator(
    params: &ParameterSet,
    cfg: &NetworkConfig,
    f_proc: &Array1<f64>,
    dims: (usize, usize),
) -> Result<FeatureMap> {
    if f_proc.len() != cfg.mlp_out {
        return Err(Error::invalid(format!(
            "f_proc dimension {} does not match mlp_out {}",
            f_proc.len(),
            cfg.mlp_out
        )));
    }
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let f = t.constant(f_proc.clone().into_dyn());
    let s = spatial_feature_generator_t(&mut t, &b, f, dims.0, dims.1);
    var_to_feature(&t, s)
}

pub fn fuse(
    params: &ParameterSet,
    sr_feat: &FeatureMap,
    spatial_feat: &FeatureMap,
) -> Result<FeatureMap> {
    if sr_feat.values.dim() != spatial_feat.values.dim() {
        return Err(Error::invalid(format!(
            "fuse dims mismatch: {:?} vs {:?}",
            sr_feat.values.dim(),
            spatial_feat.values.dim()
        )));
    }
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let s = t.constant(sr_feat.values.clone().into_dyn());
    let sp = t.constant(spatial_feat.values.clone().into_dyn());
    let f = fuse_t(&mut t, &b, s, sp);
    var_to_feature(&t, f)
}

pub fn reconstruct(
    params: &ParameterSet,
    cfg: &NetworkConfig,
    aligned: &FeatureMap,
    lr_img: &Image,
) -> Result<Image> {
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let a = t.constant(aligned.values.clone().into_dyn());
    let out = reconstruct_t(&mut t, &b, cfg, a, &lr_img.to_rgb())?;
    let arr: Array3<f64> = t.value(out).clone().into_dimensionality().unwrap();
    Ok(Image {
        pixels: chw_to_hwc(&arr),
        color_space: ColorSpace::Rgb,
        source_path: None,
    })
}

/// Full forward pass with frozen parameters; output is unclamped.
pub fn forward(
    params: &ParameterSet,
    cfg: &NetworkConfig,
    lr_img: &Image,
    emb: &SemanticEmbedding,
) -> Result<Image> {
    let mut t = Tape::new();
    let b = bind_frozen(&mut t, params);
    let out = forward_t(&mut t, &b, cfg, lr_img, emb)?;
    let arr: Array3<f64> = t.value(out).clone().into_dimensionality().unwrap();
    Ok(Image {
        pixels: chw_to_hwc(&arr),
        color_space: ColorSpace::Rgb,
        source_path: None,
    })
}

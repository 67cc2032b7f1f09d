//! Vision transformer image encoder (CLIP visual tower).
//!
//! Weights load from a safetensors file using the published layout of the
//! reference CLIP checkpoints (`vision_model.*` plus `visual_projection`,
//! including the historical `pre_layrnorm` spelling). The forward pass runs
//! on the autodiff [`Tape`] with all weights as frozen constants, so
//! semantic losses can backpropagate through the encoder into the image.
//!
//! Everything here is plain CPU `f64`; the intended checkpoints are small
//! (ViT-B/32), and tests use tiny synthetic configurations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Channel means of the CLIP preprocessing pipeline.
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
/// Channel standard deviations of the CLIP preprocessing pipeline.
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    /// Transformer width (token dimension).
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub mlp_dim: usize,
    /// Output embedding dimension after the visual projection.
    pub embed_dim: usize,
    pub eps: f64,
}

impl VitConfig {
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g + 1
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::EncoderWeights("degenerate transformer config".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::EncoderWeights(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::EncoderWeights(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }
}

/// One transformer block, with attention projections pre-sliced per head
/// and all matrices stored transposed for row-major token matmuls.
pub struct VitLayer {
    ln1_gamma: Array1<f64>,
    ln1_beta: Array1<f64>,
    /// Per head: `(width, head_dim)` projection and `(head_dim)` bias.
    q: Vec<(Array2<f64>, Array1<f64>)>,
    k: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
    ln2_gamma: Array1<f64>,
    ln2_beta: Array1<f64>,
    fc1_w: Array2<f64>,
    fc1_b: Array1<f64>,
    fc2_w: Array2<f64>,
    fc2_b: Array1<f64>,
}

pub struct VitWeights {
    pub cfg: VitConfig,
    class_embedding: Array1<f64>,
    /// `(3·p·p, width)`, multiplied from the right of the patch matrix.
    patch_proj: Array2<f64>,
    pos_embedding: Array2<f64>,
    pre_ln_gamma: Array1<f64>,
    pre_ln_beta: Array1<f64>,
    layers: Vec<VitLayer>,
    post_ln_gamma: Array1<f64>,
    post_ln_beta: Array1<f64>,
    /// `(width, embed_dim)`.
    visual_proj: Array2<f64>,
}

impl VitWeights {
    /// Load from a safetensors file in the published CLIP layout. A sibling
    /// `config.json` supplies the head count when present; otherwise the
    /// conventional 64-wide heads are assumed.
    pub fn load(path: &Path) -> Result<VitWeights> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let heads_hint = read_heads_hint(path);
        VitWeights::from_safetensors(&bytes, heads_hint)
    }

    /// Parse the raw safetensors bytes. `heads_hint` overrides the head
    /// count, which the tensor shapes alone do not determine.
    pub fn from_safetensors(bytes: &[u8], heads_hint: Option<usize>) -> Result<VitWeights> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::EncoderWeights(format!("unreadable safetensors: {e}")))?;

        let class_embedding = tensor1(&st, "vision_model.embeddings.class_embedding")?;
        let width = class_embedding.len();
        let patch_raw = tensor_nd(&st, "vision_model.embeddings.patch_embedding.weight")?;
        if patch_raw.1.len() != 4 || patch_raw.1[0] != width || patch_raw.1[1] != 3 {
            return Err(Error::EncoderWeights(format!(
                "patch embedding shape {:?} inconsistent with width {width}",
                patch_raw.1
            )));
        }
        let patch = patch_raw.1[3];
        if patch_raw.1[2] != patch {
            return Err(Error::EncoderWeights("non-square patch kernel".into()));
        }
        let pos_embedding = tensor2(&st, "vision_model.embeddings.position_embedding.weight")?;
        let tokens = pos_embedding.dim().0;
        let grid = ((tokens - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != tokens || pos_embedding.dim().1 != width {
            return Err(Error::EncoderWeights(format!(
                "position embedding shape {:?} is not a square grid plus class token",
                pos_embedding.dim()
            )));
        }
        let image_size = grid * patch;

        let (pre_ln_gamma, pre_ln_beta) = norm_pair(&st, "vision_model.pre_layrnorm")?;
        let (post_ln_gamma, post_ln_beta) = norm_pair(&st, "vision_model.post_layernorm")?;
        let visual_proj_raw = tensor2(&st, "visual_projection.weight")?;
        if visual_proj_raw.dim().1 != width {
            return Err(Error::EncoderWeights(format!(
                "visual projection shape {:?} inconsistent with width {width}",
                visual_proj_raw.dim()
            )));
        }
        let embed_dim = visual_proj_raw.dim().0;

        let layer_count = (0..)
            .take_while(|i| {
                st.names()
                    .iter()
                    .any(|n| n.starts_with(&format!("vision_model.encoder.layers.{i}.")))
            })
            .count();
        if layer_count == 0 {
            return Err(Error::EncoderWeights("no encoder layers found".into()));
        }

        let heads = heads_hint.unwrap_or_else(|| (width / 64).max(1));
        let mut mlp_dim = 0;
        let mut layers = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            let p = format!("vision_model.encoder.layers.{i}");
            let (ln1_gamma, ln1_beta) = norm_pair(&st, &format!("{p}.layer_norm1"))?;
            let (ln2_gamma, ln2_beta) = norm_pair(&st, &format!("{p}.layer_norm2"))?;
            let q = head_slices(&st, &format!("{p}.self_attn.q_proj"), width, heads)?;
            let k = head_slices(&st, &format!("{p}.self_attn.k_proj"), width, heads)?;
            let v = head_slices(&st, &format!("{p}.self_attn.v_proj"), width, heads)?;
            let out_raw = tensor2(&st, &format!("{p}.self_attn.out_proj.weight"))?;
            let out_b = tensor1(&st, &format!("{p}.self_attn.out_proj.bias"))?;
            let fc1_raw = tensor2(&st, &format!("{p}.mlp.fc1.weight"))?;
            let fc1_b = tensor1(&st, &format!("{p}.mlp.fc1.bias"))?;
            let fc2_raw = tensor2(&st, &format!("{p}.mlp.fc2.weight"))?;
            let fc2_b = tensor1(&st, &format!("{p}.mlp.fc2.bias"))?;
            mlp_dim = fc1_raw.dim().0;
            if fc1_raw.dim().1 != width || fc2_raw.dim() != (width, mlp_dim) {
                return Err(Error::EncoderWeights(format!(
                    "mlp shapes {:?}/{:?} inconsistent in layer {i}",
                    fc1_raw.dim(),
                    fc2_raw.dim()
                )));
            }
            layers.push(VitLayer {
                ln1_gamma,
                ln1_beta,
                q,
                k,
                v,
                out_w: out_raw.t().to_owned(),
                out_b,
                ln2_gamma,
                ln2_beta,
                fc1_w: fc1_raw.t().to_owned(),
                fc1_b,
                fc2_w: fc2_raw.t().to_owned(),
                fc2_b,
            });
        }

        let cfg = VitConfig {
            width,
            layers: layer_count,
            heads,
            patch,
            image_size,
            mlp_dim,
            embed_dim,
            eps: 1e-5,
        };
        cfg.validate()?;

        let patch_flat = patch_raw
            .0
            .into_shape_with_order((width, 3 * patch * patch))
            .map_err(|e| Error::EncoderWeights(e.to_string()))?;

        Ok(VitWeights {
            cfg,
            class_embedding,
            patch_proj: patch_flat.t().to_owned(),
            pos_embedding,
            pre_ln_gamma,
            pre_ln_beta,
            layers,
            post_ln_gamma,
            post_ln_beta,
            visual_proj: visual_proj_raw.t().to_owned(),
        })
    }

    /// Randomly initialized weights for tests; deterministic in `seed`.
    pub fn synthetic(cfg: &VitConfig, seed: u64) -> VitWeights {
        cfg.validate().expect("synthetic config must be valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dh = cfg.width / cfg.heads;
        let mut mat = |r: usize, c: usize| {
            let s = 1.0 / (c as f64).sqrt();
            Array2::from_shape_simple_fn((r, c), || rng.gen_range(-s..s))
        };
        let vec_small = |n: usize| {
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
            Array1::from_shape_simple_fn(n, || rng2.gen_range(-0.02..0.02))
        };
        let layers = (0..cfg.layers)
            .map(|_| VitLayer {
                ln1_gamma: Array1::ones(cfg.width),
                ln1_beta: Array1::zeros(cfg.width),
                q: (0..cfg.heads)
                    .map(|_| (mat(cfg.width, dh), Array1::zeros(dh)))
                    .collect(),
                k: (0..cfg.heads)
                    .map(|_| (mat(cfg.width, dh), Array1::zeros(dh)))
                    .collect(),
                v: (0..cfg.heads)
                    .map(|_| (mat(cfg.width, dh), Array1::zeros(dh)))
                    .collect(),
                out_w: mat(cfg.width, cfg.width),
                out_b: Array1::zeros(cfg.width),
                ln2_gamma: Array1::ones(cfg.width),
                ln2_beta: Array1::zeros(cfg.width),
                fc1_w: mat(cfg.width, cfg.mlp_dim),
                fc1_b: Array1::zeros(cfg.mlp_dim),
                fc2_w: mat(cfg.mlp_dim, cfg.width),
                fc2_b: Array1::zeros(cfg.width),
            })
            .collect();
        VitWeights {
            cfg: cfg.clone(),
            class_embedding: vec_small(cfg.width),
            patch_proj: mat(3 * cfg.patch * cfg.patch, cfg.width),
            pos_embedding: mat(cfg.tokens(), cfg.width).mapv(|v| v * 0.1),
            pre_ln_gamma: Array1::ones(cfg.width),
            pre_ln_beta: Array1::zeros(cfg.width),
            layers,
            post_ln_gamma: Array1::ones(cfg.width),
            post_ln_beta: Array1::zeros(cfg.width),
            visual_proj: mat(cfg.width, cfg.embed_dim),
        }
    }

    /// Serialize back to the published tensor layout (f64 payload).
    pub fn save_hf_layout(&self, path: &Path) -> Result<()> {
        let cfg = &self.cfg;
        let dh = cfg.width / cfg.heads;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        let put1 = |t: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
                        name: &str,
                        a: &Array1<f64>| {
            t.insert(name.to_string(), (vec![a.len()], a.to_vec()));
        };
        let put2 = |t: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
                    name: &str,
                    a: &Array2<f64>| {
            t.insert(
                name.to_string(),
                (
                    vec![a.dim().0, a.dim().1],
                    a.iter().cloned().collect(),
                ),
            );
        };
        put1(
            &mut tensors,
            "vision_model.embeddings.class_embedding",
            &self.class_embedding,
        );
        let patch_hf = self.patch_proj.t().to_owned();
        tensors.insert(
            "vision_model.embeddings.patch_embedding.weight".into(),
            (
                vec![cfg.width, 3, cfg.patch, cfg.patch],
                patch_hf.iter().cloned().collect(),
            ),
        );
        put2(
            &mut tensors,
            "vision_model.embeddings.position_embedding.weight",
            &self.pos_embedding,
        );
        put1(&mut tensors, "vision_model.pre_layrnorm.weight", &self.pre_ln_gamma);
        put1(&mut tensors, "vision_model.pre_layrnorm.bias", &self.pre_ln_beta);
        put1(
            &mut tensors,
            "vision_model.post_layernorm.weight",
            &self.post_ln_gamma,
        );
        put1(
            &mut tensors,
            "vision_model.post_layernorm.bias",
            &self.post_ln_beta,
        );
        put2(
            &mut tensors,
            "visual_projection.weight",
            &self.visual_proj.t().to_owned(),
        );
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("vision_model.encoder.layers.{i}");
            put1(&mut tensors, &format!("{p}.layer_norm1.weight"), &l.ln1_gamma);
            put1(&mut tensors, &format!("{p}.layer_norm1.bias"), &l.ln1_beta);
            put1(&mut tensors, &format!("{p}.layer_norm2.weight"), &l.ln2_gamma);
            put1(&mut tensors, &format!("{p}.layer_norm2.bias"), &l.ln2_beta);
            for (tag, slices) in [("q_proj", &l.q), ("k_proj", &l.k), ("v_proj", &l.v)] {
                let mut w = Array2::zeros((cfg.width, cfg.width));
                let mut b = Array1::zeros(cfg.width);
                for (h, (wh, bh)) in slices.iter().enumerate() {
                    for r in 0..dh {
                        b[h * dh + r] = bh[r];
                        for c in 0..cfg.width {
                            w[[h * dh + r, c]] = wh[[c, r]];
                        }
                    }
                }
                put2(&mut tensors, &format!("{p}.self_attn.{tag}.weight"), &w);
                put1(&mut tensors, &format!("{p}.self_attn.{tag}.bias"), &b);
            }
            put2(
                &mut tensors,
                &format!("{p}.self_attn.out_proj.weight"),
                &l.out_w.t().to_owned(),
            );
            put1(&mut tensors, &format!("{p}.self_attn.out_proj.bias"), &l.out_b);
            put2(&mut tensors, &format!("{p}.mlp.fc1.weight"), &l.fc1_w.t().to_owned());
            put1(&mut tensors, &format!("{p}.mlp.fc1.bias"), &l.fc1_b);
            put2(&mut tensors, &format!("{p}.mlp.fc2.weight"), &l.fc2_w.t().to_owned());
            put1(&mut tensors, &format!("{p}.mlp.fc2.bias"), &l.fc2_b);
        }

        let byte_tensors: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .into_iter()
            .map(|(name, (shape, data))| {
                let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name, shape, bytes)
            })
            .collect();
        let views: Vec<(&str, TensorView)> = byte_tensors
            .iter()
            .map(|(name, shape, bytes)| {
                (
                    name.as_str(),
                    TensorView::new(Dtype::F64, shape.clone(), bytes).unwrap(),
                )
            })
            .collect();
        let blob = safetensors::serialize(views, &None)
            .map_err(|e| Error::EncoderWeights(e.to_string()))?;
        std::fs::write(path, blob).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Preprocess and encode an image variable `(3, H, W)` in `[0,1]`:
    /// bicubic resize to the grid size, channel normalization, patch
    /// embedding, transformer, class-token projection. The returned
    /// embedding is not yet L2-normalized.
    pub fn embed_on_tape(&self, t: &mut Tape, img: Var) -> Var {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        let shape = t.value(img).shape().to_vec();
        assert_eq!(shape.len(), 3, "encoder input must be (C,H,W)");
        assert_eq!(shape[0], 3, "encoder input must have 3 channels");
        let resized = if shape[1] == s && shape[2] == s {
            img
        } else {
            let ky = crate::resample::resample_matrix(shape[1], s);
            let kx = crate::resample::resample_matrix(shape[2], s);
            t.resize_with(img, ky, kx)
        };
        let mut mean = ndarray::Array3::zeros((3, s, s));
        let mut inv_std = ndarray::Array3::zeros((3, s, s));
        for c in 0..3 {
            mean.index_axis_mut(ndarray::Axis(0), c).fill(CLIP_MEAN[c]);
            inv_std
                .index_axis_mut(ndarray::Axis(0), c)
                .fill(1.0 / CLIP_STD[c]);
        }
        let mean_v = t.constant(mean.into_dyn());
        let inv_v = t.constant(inv_std.into_dyn());
        let centered = t.sub(resized, mean_v);
        let normed = t.mul(centered, inv_v);

        let patches = t.extract_patches(normed, cfg.patch);
        let proj = t.constant(self.patch_proj.clone().into_dyn());
        let tok = t.matmul(patches, proj);
        let cls = t.constant(
            self.class_embedding
                .clone()
                .into_shape_with_order((1, cfg.width))
                .unwrap()
                .into_dyn(),
        );
        let seq = t.concat_rows(&[cls, tok]);
        let pos = t.constant(self.pos_embedding.clone().into_dyn());
        let seq = t.add(seq, pos);

        let pre_g = t.constant(self.pre_ln_gamma.clone().into_dyn());
        let pre_b = t.constant(self.pre_ln_beta.clone().into_dyn());
        let mut x = t.layer_norm_rows(seq, pre_g, pre_b, cfg.eps);

        let dh = cfg.width / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let g1 = t.constant(layer.ln1_gamma.clone().into_dyn());
            let b1 = t.constant(layer.ln1_beta.clone().into_dyn());
            let nx = t.layer_norm_rows(x, g1, b1, cfg.eps);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qw = t.constant(layer.q[h].0.clone().into_dyn());
                let qb = t.constant(layer.q[h].1.clone().into_dyn());
                let kw = t.constant(layer.k[h].0.clone().into_dyn());
                let kb = t.constant(layer.k[h].1.clone().into_dyn());
                let vw = t.constant(layer.v[h].0.clone().into_dyn());
                let vb = t.constant(layer.v[h].1.clone().into_dyn());
                let qm = t.matmul(nx, qw);
                let q = t.add_row_broadcast(qm, qb);
                let km = t.matmul(nx, kw);
                let k = t.add_row_broadcast(km, kb);
                let vm = t.matmul(nx, vw);
                let v = t.add_row_broadcast(vm, vb);
                let kt = t.transpose(k);
                let logits = t.matmul(q, kt);
                let scaled = t.scale(logits, scale);
                let probs = t.softmax_rows(scaled);
                heads.push(t.matmul(probs, v));
            }
            let cat = t.concat_cols(&heads);
            let ow = t.constant(layer.out_w.clone().into_dyn());
            let ob = t.constant(layer.out_b.clone().into_dyn());
            let am = t.matmul(cat, ow);
            let attn = t.add_row_broadcast(am, ob);
            x = t.add(x, attn);

            let g2 = t.constant(layer.ln2_gamma.clone().into_dyn());
            let b2 = t.constant(layer.ln2_beta.clone().into_dyn());
            let nx2 = t.layer_norm_rows(x, g2, b2, cfg.eps);
            let f1w = t.constant(layer.fc1_w.clone().into_dyn());
            let f1b = t.constant(layer.fc1_b.clone().into_dyn());
            let h1m = t.matmul(nx2, f1w);
            let h1 = t.add_row_broadcast(h1m, f1b);
            let act = t.quick_gelu(h1);
            let f2w = t.constant(layer.fc2_w.clone().into_dyn());
            let f2b = t.constant(layer.fc2_b.clone().into_dyn());
            let h2m = t.matmul(act, f2w);
            let h2 = t.add_row_broadcast(h2m, f2b);
            x = t.add(x, h2);
        }

        let cls_tok = t.take_row(x, 0);
        let pg = t.constant(self.post_ln_gamma.clone().into_dyn());
        let pb = t.constant(self.post_ln_beta.clone().into_dyn());
        let pooled = t.layer_norm_vec(cls_tok, pg, pb, cfg.eps);
        let row = t.reshape(pooled, &[1, cfg.width]);
        let vp = t.constant(self.visual_proj.clone().into_dyn());
        let projected = t.matmul(row, vp);
        t.reshape(projected, &[cfg.embed_dim])
    }

    /// Token matrices after selected transformer blocks, for feature-space
    /// (perceptual) losses. `picks` are 1-based block indices.
    pub fn stage_features_on_tape(&self, t: &mut Tape, img: Var, picks: &[usize]) -> Vec<Var> {
        // rebuilt inline rather than sharing embed_on_tape so the stage
        // cut points stay explicit
        let cfg = &self.cfg;
        let s = cfg.image_size;
        let shape = t.value(img).shape().to_vec();
        let resized = if shape[1] == s && shape[2] == s {
            img
        } else {
            let ky = crate::resample::resample_matrix(shape[1], s);
            let kx = crate::resample::resample_matrix(shape[2], s);
            t.resize_with(img, ky, kx)
        };
        let mut mean = ndarray::Array3::zeros((3, s, s));
        let mut inv_std = ndarray::Array3::zeros((3, s, s));
        for c in 0..3 {
            mean.index_axis_mut(ndarray::Axis(0), c).fill(CLIP_MEAN[c]);
            inv_std
                .index_axis_mut(ndarray::Axis(0), c)
                .fill(1.0 / CLIP_STD[c]);
        }
        let mean_v = t.constant(mean.into_dyn());
        let inv_v = t.constant(inv_std.into_dyn());
        let centered = t.sub(resized, mean_v);
        let normed = t.mul(centered, inv_v);
        let patches = t.extract_patches(normed, cfg.patch);
        let proj = t.constant(self.patch_proj.clone().into_dyn());
        let tok = t.matmul(patches, proj);
        let cls = t.constant(
            self.class_embedding
                .clone()
                .into_shape_with_order((1, cfg.width))
                .unwrap()
                .into_dyn(),
        );
        let seq = t.concat_rows(&[cls, tok]);
        let pos = t.constant(self.pos_embedding.clone().into_dyn());
        let seq = t.add(seq, pos);
        let pre_g = t.constant(self.pre_ln_gamma.clone().into_dyn());
        let pre_b = t.constant(self.pre_ln_beta.clone().into_dyn());
        let mut x = t.layer_norm_rows(seq, pre_g, pre_b, cfg.eps);

        let dh = cfg.width / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let g1 = t.constant(layer.ln1_gamma.clone().into_dyn());
            let b1 = t.constant(layer.ln1_beta.clone().into_dyn());
            let nx = t.layer_norm_rows(x, g1, b1, cfg.eps);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qw = t.constant(layer.q[h].0.clone().into_dyn());
                let qb = t.constant(layer.q[h].1.clone().into_dyn());
                let kw = t.constant(layer.k[h].0.clone().into_dyn());
                let kb = t.constant(layer.k[h].1.clone().into_dyn());
                let vw = t.constant(layer.v[h].0.clone().into_dyn());
                let vb = t.constant(layer.v[h].1.clone().into_dyn());
                let qm = t.matmul(nx, qw);
                let q = t.add_row_broadcast(qm, qb);
                let km = t.matmul(nx, kw);
                let k = t.add_row_broadcast(km, kb);
                let vm = t.matmul(nx, vw);
                let v = t.add_row_broadcast(vm, vb);
                let kt = t.transpose(k);
                let logits = t.matmul(q, kt);
                let scaled = t.scale(logits, scale);
                let probs = t.softmax_rows(scaled);
                heads.push(t.matmul(probs, v));
            }
            let cat = t.concat_cols(&heads);
            let ow = t.constant(layer.out_w.clone().into_dyn());
            let ob = t.constant(layer.out_b.clone().into_dyn());
            let am = t.matmul(cat, ow);
            let attn = t.add_row_broadcast(am, ob);
            x = t.add(x, attn);
            let g2 = t.constant(layer.ln2_gamma.clone().into_dyn());
            let b2 = t.constant(layer.ln2_beta.clone().into_dyn());
            let nx2 = t.layer_norm_rows(x, g2, b2, cfg.eps);
            let f1w = t.constant(layer.fc1_w.clone().into_dyn());
            let f1b = t.constant(layer.fc1_b.clone().into_dyn());
            let h1m = t.matmul(nx2, f1w);
            let h1 = t.add_row_broadcast(h1m, f1b);
            let act = t.quick_gelu(h1);
            let f2w = t.constant(layer.fc2_w.clone().into_dyn());
            let f2b = t.constant(layer.fc2_b.clone().into_dyn());
            let h2m = t.matmul(act, f2w);
            let h2 = t.add_row_broadcast(h2m, f2b);
            x = t.add(x, h2);
            if picks.contains(&(li + 1)) {
                out.push(x);
            }
        }
        out
    }
}

fn read_heads_hint(weights_path: &Path) -> Option<usize> {
    let dir = weights_path.parent()?;
    let cfg_path: PathBuf = dir.join("config.json");
    let text = std::fs::read_to_string(cfg_path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    let vision = value.get("vision_config").unwrap_or(&value);
    vision
        .get("num_attention_heads")
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
}

fn decode_tensor(view: &TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    let out = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f64())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes(c.try_into().unwrap()).to_f64())
            .collect(),
        other => {
            return Err(Error::EncoderWeights(format!(
                "unsupported tensor dtype {other:?}"
            )))
        }
    };
    Ok(out)
}

fn tensor_nd(st: &SafeTensors<'_>, name: &str) -> Result<(ndarray::ArrayD<f64>, Vec<usize>)> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::EncoderWeights(format!("missing tensor {name}")))?;
    let shape = view.shape().to_vec();
    let data = decode_tensor(&view)?;
    let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
        .map_err(|e| Error::EncoderWeights(format!("tensor {name}: {e}")))?;
    Ok((arr, shape))
}

fn tensor1(st: &SafeTensors<'_>, name: &str) -> Result<Array1<f64>> {
    let (arr, shape) = tensor_nd(st, name)?;
    if shape.len() != 1 {
        return Err(Error::EncoderWeights(format!(
            "tensor {name} has shape {shape:?}, expected 1-d"
        )));
    }
    Ok(arr.into_dimensionality().unwrap())
}

fn tensor2(st: &SafeTensors<'_>, name: &str) -> Result<Array2<f64>> {
    let (arr, shape) = tensor_nd(st, name)?;
    if shape.len() != 2 {
        return Err(Error::EncoderWeights(format!(
            "tensor {name} has shape {shape:?}, expected 2-d"
        )));
    }
    Ok(arr.into_dimensionality().unwrap())
}

fn norm_pair(st: &SafeTensors<'_>, prefix: &str) -> Result<(Array1<f64>, Array1<f64>)> {
    Ok((
        tensor1(st, &format!("{prefix}.weight"))?,
        tensor1(st, &format!("{prefix}.bias"))?,
    ))
}

fn head_slices(
    st: &SafeTensors<'_>,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
    let w = tensor2(st, &format!("{prefix}.weight"))?;
    let b = tensor1(st, &format!("{prefix}.bias"))?;
    if w.dim() != (width, width) || b.len() != width {
        return Err(Error::EncoderWeights(format!(
            "attention projection {prefix} has unexpected shape"
        )));
    }
    if width % heads != 0 {
        return Err(Error::EncoderWeights(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    Ok((0..heads)
        .map(|h| {
            let rows = w.slice(ndarray::s![h * dh..(h + 1) * dh, ..]);
            let bias = b.slice(ndarray::s![h * dh..(h + 1) * dh]).to_owned();
            (rows.t().to_owned(), bias)
        })
        .collect())
}

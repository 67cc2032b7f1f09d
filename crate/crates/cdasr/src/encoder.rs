//! Frozen semantic image encoder behind a uniform interface.
//!
//! Two backends: `pretrained` runs a CLIP-style vision transformer loaded
//! from a local safetensors file, `stub` is a cheap deterministic projection
//! that needs no weight files and exists so the whole pipeline (including
//! semantic losses) is testable offline. Embeddings are always divided by
//! their own L2 norm before use.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{hwc_to_chw, Image, LUMA_WEIGHTS};
use crate::vit::VitWeights;

/// Grid side of the stub's pooled luma statistics.
const STUB_GRID: usize = 8;
/// Fixed seed of the stub's random projection; part of the stub's identity.
const STUB_SEED: u64 = 0xCDA5;
/// Environment variable pointing at pretrained weights (a safetensors file
/// or a directory containing `model.safetensors`).
pub const ENCODER_CACHE_ENV: &str = "CDASR_ENCODER_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderBackend {
    Pretrained,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backend: EncoderBackend,
    /// Square input resolution the image is resized to before encoding.
    pub input_size: usize,
    /// Output embedding dimension c.
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn stub() -> Self {
        EncoderSpec {
            backend: EncoderBackend::Stub,
            input_size: 32,
            embed_dim: 512,
        }
    }

    pub fn stub_with_dim(embed_dim: usize) -> Self {
        EncoderSpec {
            embed_dim,
            ..EncoderSpec::stub()
        }
    }

    pub fn pretrained() -> Self {
        EncoderSpec {
            backend: EncoderBackend::Pretrained,
            input_size: 224,
            embed_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::invalid(format!(
                "embed_dim {} below minimum 8",
                self.embed_dim
            )));
        }
        if self.input_size < 8 {
            return Err(Error::invalid(format!(
                "input_size {} below minimum 8",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Unit-norm semantic feature vector f_CLIP(I).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub values: Array1<f64>,
    pub encoder_id: String,
}

impl SemanticEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &SemanticEmbedding) -> f64 {
        self.values.dot(&other.values)
    }
}

enum BackendImpl {
    /// Fixed random projection `(embed_dim, STUB_GRID² + 1)`.
    Stub { proj: Array2<f64> },
    Vit(Box<VitWeights>),
}

/// A loaded, immutable encoder.
pub struct Encoder {
    spec: EncoderSpec,
    backend: BackendImpl,
}

impl Encoder {
    pub fn load(spec: &EncoderSpec) -> Result<Encoder> {
        spec.validate()?;
        match spec.backend {
            EncoderBackend::Stub => Ok(Encoder {
                spec: spec.clone(),
                backend: BackendImpl::Stub {
                    proj: stub_projection(spec.embed_dim),
                },
            }),
            EncoderBackend::Pretrained => {
                let path = locate_pretrained_weights()?;
                let weights = VitWeights::load(&path)?;
                Encoder::from_vit(spec, weights)
            }
        }
    }

    /// Wrap already-loaded transformer weights (used by tests that build
    /// synthetic checkpoints, and by the weight-file loader).
    pub fn from_vit(spec: &EncoderSpec, weights: VitWeights) -> Result<Encoder> {
        spec.validate()?;
        if weights.cfg.embed_dim != spec.embed_dim {
            return Err(Error::EncoderWeights(format!(
                "weights produce {}-d embeddings but spec wants {}",
                weights.cfg.embed_dim, spec.embed_dim
            )));
        }
        if weights.cfg.image_size != spec.input_size {
            return Err(Error::EncoderWeights(format!(
                "weights expect {}px input but spec wants {}px",
                weights.cfg.image_size, spec.input_size
            )));
        }
        Ok(Encoder {
            spec: spec.clone(),
            backend: BackendImpl::Vit(Box::new(weights)),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Stable identity string recorded in checkpoints.
    pub fn encoder_id(&self) -> String {
        match &self.backend {
            BackendImpl::Stub { .. } => format!("stub-v1-d{}", self.spec.embed_dim),
            BackendImpl::Vit(w) => format!(
                "clip-vit-p{}-w{}-l{}-d{}",
                w.cfg.patch, w.cfg.width, w.cfg.layers, w.cfg.embed_dim
            ),
        }
    }

    /// Differentiable encoding of an RGB image variable `(3, H, W)`.
    /// Output is the unit-norm embedding vector `(embed_dim)`.
    pub fn embed_on_tape(&self, t: &mut Tape, img: Var) -> Var {
        let raw = match &self.backend {
            BackendImpl::Stub { proj } => self.stub_raw_on_tape(t, img, proj),
            BackendImpl::Vit(w) => w.embed_on_tape(t, img),
        };
        t.l2_normalize_vec(raw)
    }

    /// Multi-stage features for the perceptual loss. The stub backend pools
    /// luma statistics at grids 8, 4 and 2; the pretrained backend returns
    /// token matrices after the first three transformer blocks.
    pub fn perceptual_features_on_tape(&self, t: &mut Tape, img: Var) -> Vec<Var> {
        match &self.backend {
            BackendImpl::Stub { .. } => {
                let luma = t.channel_weighted_sum(img, &LUMA_WEIGHTS);
                [8usize, 4, 2]
                    .iter()
                    .map(|&g| t.adaptive_avg_pool(luma, g, g))
                    .collect()
            }
            BackendImpl::Vit(w) => {
                let picks: Vec<usize> = (1..=w.cfg.layers.min(3)).collect();
                w.stage_features_on_tape(t, img, &picks)
            }
        }
    }

    fn stub_raw_on_tape(&self, t: &mut Tape, img: Var, proj: &Array2<f64>) -> Var {
        let s = self.spec.input_size;
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
        let luma = t.channel_weighted_sum(resized, &LUMA_WEIGHTS);
        let pooled = t.adaptive_avg_pool(luma, STUB_GRID, STUB_GRID);
        let stats = t.reshape(pooled, &[STUB_GRID * STUB_GRID, 1]);
        let one = t.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), 1.0));
        let with_bias = t.concat_rows(&[stats, one]);
        let pv = t.constant(proj.clone().into_dyn());
        let lin = t.matmul(pv, with_bias);
        let flat = t.reshape(lin, &[self.spec.embed_dim]);
        t.tanh(flat)
    }

    /// Encode one image (Eq. 1): resize, embed, L2-normalize. A zero-norm
    /// raw embedding falls back to the first basis vector.
    pub fn encode(&self, img: &Image) -> Result<SemanticEmbedding> {
        let rgb = img.to_rgb();
        let mut t = Tape::new();
        let chw = hwc_to_chw(&rgb.pixels);
        let v = t.constant(chw.into_dyn());
        let emb = self.embed_on_tape(&mut t, v);
        let values: Array1<f64> = t
            .value(emb)
            .clone()
            .into_dimensionality()
            .expect("embedding must be 1-d");
        let norm = values.dot(&values).sqrt();
        let values = if (norm - 1.0).abs() > 1e-6 {
            // the tape normalizer flushes zero-norm vectors to zero
            log::warn!(
                "degenerate raw embedding (norm {norm:.3e}); using basis fallback"
            );
            let mut e1 = Array1::zeros(self.spec.embed_dim);
            e1[0] = 1.0;
            e1
        } else {
            values
        };
        Ok(SemanticEmbedding {
            values,
            encoder_id: self.encoder_id(),
        })
    }

    pub fn encode_batch(&self, imgs: &[Image]) -> Result<Vec<SemanticEmbedding>> {
        if imgs.is_empty() {
            return Err(Error::invalid("encode_batch on empty list"));
        }
        imgs.iter().map(|img| self.encode(img)).collect()
    }
}

fn stub_projection(embed_dim: usize) -> Array2<f64> {
    let cols = STUB_GRID * STUB_GRID + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
    let scale = 2.5 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((embed_dim, cols), || rng.gen_range(-1.0..1.0) * scale)
}

fn locate_pretrained_weights() -> Result<PathBuf> {
    let base = std::env::var_os(ENCODER_CACHE_ENV).ok_or_else(|| {
        Error::EncoderWeights(format!(
            "pretrained backend needs {ENCODER_CACHE_ENV} to point at a weights \
             file or directory"
        ))
    })?;
    let base = PathBuf::from(base);
    if base.is_file() {
        return Ok(base);
    }
    let candidate = base.join("model.safetensors");
    if candidate.is_file() {
        return Ok(candidate);
    }
    Err(Error::EncoderWeights(format!(
        "no weights at {} (expected a safetensors file or model.safetensors \
         inside it)",
        base.display()
    )))
}

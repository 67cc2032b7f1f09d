//! The three training loss terms and their weighted total (Eq. 6 through 9).
//!
//! Each term exists in two forms: a tape-level function composed into the
//! training graph, and a plain wrapper over immutable images for reporting
//! and evaluation. The wrappers run the same graph with constant inputs, so
//! the two forms cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, SemanticEmbedding};
use crate::error::{Error, Result};
use crate::image::{hwc_to_chw, Image};

fn default_pixel() -> f64 {
    1.0
}
fn default_perceptual() -> f64 {
    0.1
}
fn default_semantic() -> f64 {
    0.01
}

/// Term weights of Eq. 6/8. Eq. 8 writes the pixel term with an implicit
/// unit weight; the general form here reduces to it at the default 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_pixel")]
    pub pixel: f64,
    #[serde(default = "default_perceptual")]
    pub perceptual: f64,
    #[serde(default = "default_semantic")]
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: default_pixel(),
            perceptual: default_perceptual(),
            semantic: default_semantic(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pixel", self.pixel),
            ("perceptual", self.perceptual),
            ("semantic", self.semantic),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. Components are unweighted;
/// `total` is their weighted sum. A term whose weight is zero is skipped
/// entirely and reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub semantic: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.pixel.is_finite()
            && self.perceptual.is_finite()
            && self.semantic.is_finite()
    }
}

/// Total loss variable plus the per-term report of its forward values.
pub struct TotalLoss {
    pub total: Var,
    pub report: LossReport,
}

fn require_same_dims(pred: &Image, target: &Image) -> Result<()> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::invalid(format!(
            "loss inputs disagree: prediction {}x{}, target {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Eq. 8 pixel term: mean absolute difference.
pub fn l1_loss_t(t: &mut Tape, pred: Var, target: Var) -> Var {
    t.l1_diff(pred, target)
}

/// Eq. 8 perceptual term: sum over extractor stages of the mean squared
/// feature difference.
pub fn perceptual_loss_t(t: &mut Tape, enc: &Encoder, pred: Var, target: Var) -> Var {
    let fp = enc.perceptual_features_on_tape(t, pred);
    let ft = enc.perceptual_features_on_tape(t, target);
    let mut acc: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let term = t.mean_squared_diff(a, b);
        acc = Some(match acc {
            Some(s) => t.add(s, term),
            None => term,
        });
    }
    acc.expect("feature extractor produced no stages")
}

/// Eq. 9 semantic term: squared distance between the prediction's unit
/// embedding and a fixed target embedding. Gradients flow through the
/// prediction only.
pub fn semantic_loss_t(
    t: &mut Tape,
    enc: &Encoder,
    pred: Var,
    target_emb: &SemanticEmbedding,
) -> Var {
    let e = enc.embed_on_tape(t, pred);
    let c = t.constant(target_emb.values.clone().into_dyn());
    t.squared_dist(e, c)
}

/// Weighted total over a tape-resident prediction `(3, H, W)`. Terms with
/// zero weight never enter the graph.
pub fn total_loss_t(
    t: &mut Tape,
    enc: &Encoder,
    pred: Var,
    target: &Image,
    w: &LossWeights,
) -> Result<TotalLoss> {
    w.validate()?;
    let tgt = target.to_rgb();
    let shape = t.value(pred).shape().to_vec();
    if shape != [3, tgt.height(), tgt.width()] {
        return Err(Error::invalid(format!(
            "loss inputs disagree: prediction {shape:?}, target (3, {}, {})",
            tgt.height(),
            tgt.width()
        )));
    }
    let tv = t.constant(hwc_to_chw(&tgt.pixels).into_dyn());

    let mut report = LossReport {
        total: 0.0,
        pixel: 0.0,
        perceptual: 0.0,
        semantic: 0.0,
    };
    let mut total: Option<Var> = None;
    let mut accumulate = |t: &mut Tape, term: Var, weight: f64| {
        let scaled = t.scale(term, weight);
        total = Some(match total {
            Some(s) => t.add(s, scaled),
            None => scaled,
        });
    };

    if w.pixel > 0.0 {
        let term = l1_loss_t(t, pred, tv);
        report.pixel = t.scalar(term);
        accumulate(t, term, w.pixel);
    }
    if w.perceptual > 0.0 {
        let term = perceptual_loss_t(t, enc, pred, tv);
        report.perceptual = t.scalar(term);
        accumulate(t, term, w.perceptual);
    }
    if w.semantic > 0.0 {
        let target_emb = enc.encode(&tgt)?;
        let term = semantic_loss_t(t, enc, pred, &target_emb);
        report.semantic = t.scalar(term);
        accumulate(t, term, w.semantic);
    }

    let total = total.unwrap_or_else(|| {
        t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])))
    });
    report.total = t.scalar(total);
    Ok(TotalLoss { total, report })
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(pred: &Image, target: &Image) -> Result<f64> {
    require_same_dims(pred, target)?;
    let a = pred.to_rgb();
    let b = target.to_rgb();
    let sum: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Perceptual distance under the encoder's feature extractor.
pub fn perceptual_loss(pred: &Image, target: &Image, enc: &Encoder) -> Result<f64> {
    require_same_dims(pred, target)?;
    let mut t = Tape::new();
    let p = t.constant(hwc_to_chw(&pred.to_rgb().pixels).into_dyn());
    let q = t.constant(hwc_to_chw(&target.to_rgb().pixels).into_dyn());
    let v = perceptual_loss_t(&mut t, enc, p, q);
    Ok(t.scalar(v))
}

/// Squared embedding distance in the encoder's feature space (Eq. 9).
pub fn semantic_loss(pred: &Image, target: &Image, enc: &Encoder) -> Result<f64> {
    require_same_dims(pred, target)?;
    let target_emb = enc.encode(target)?;
    let mut t = Tape::new();
    let p = t.constant(hwc_to_chw(&pred.to_rgb().pixels).into_dyn());
    let v = semantic_loss_t(&mut t, enc, p, &target_emb);
    Ok(t.scalar(v))
}

/// Weighted total over plain images.
pub fn total_loss(
    pred: &Image,
    target: &Image,
    enc: &Encoder,
    w: &LossWeights,
) -> Result<LossReport> {
    require_same_dims(pred, target)?;
    let mut t = Tape::new();
    let p = t.constant(hwc_to_chw(&pred.to_rgb().pixels).into_dyn());
    Ok(total_loss_t(&mut t, enc, p, target, w)?.report)
}

//! Bicubic resampling.
//!
//! Convention (fixed so that independent oracles can reproduce it):
//! - Catmull-Rom cubic kernel, `a = -0.5`.
//! - Output pixel `i` samples the source at `u = (i + 0.5) * ratio - 0.5`
//!   where `ratio = n_in / n_out`.
//! - When shrinking, the kernel is widened by the ratio (antialias); when
//!   enlarging it is used at its natural width.
//! - Taps falling outside the source are clamped to the border
//!   (edge-replicate), and each output's weights are normalized to sum 1.
//! - Axes are separable: rows then columns.
//!
//! Public dataset-facing operations clamp results into `[0, 1]`;
//! `resize_raw` keeps the untouched linear combination for callers that
//! need differentiability.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::Image;

pub const ALLOWED_SCALES: [usize; 4] = [2, 4, 8, 16];

const A: f64 = -0.5;

pub fn bicubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel source taps and normalized weights for one axis.
pub fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    assert!(n_in >= 1 && n_out >= 1);
    let ratio = n_in as f64 / n_out as f64;
    let kscale = ratio.max(1.0);
    let support = 2.0 * kscale;
    let mut rows = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let u = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (u - support).ceil() as isize;
        let hi = (u + support).floor() as isize;
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
        let mut total = 0.0;
        for j in lo..=hi {
            let w = bicubic_kernel((u - j as f64) / kscale) / kscale;
            if w == 0.0 {
                continue;
            }
            let src = j.clamp(0, n_in as isize - 1) as usize;
            total += w;
            // merge duplicate clamped indices so downstream code sees one tap
            if let Some(last) = taps.last_mut() {
                if last.0 == src {
                    last.1 += w;
                    continue;
                }
            }
            taps.push((src, w));
        }
        if total != 0.0 {
            for t in &mut taps {
                t.1 /= total;
            }
        }
        rows.push(taps);
    }
    rows
}

/// Dense `(n_out, n_in)` matrix form of [`resample_weights`].
pub fn resample_matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    let rows = resample_weights(n_in, n_out);
    let mut m = Array2::zeros((n_out, n_in));
    for (i, taps) in rows.iter().enumerate() {
        for &(j, w) in taps {
            m[[i, j]] += w;
        }
    }
    m
}

/// Separable bicubic resize without range clamping.
pub fn resize_raw(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = img.pixels.dim();
    let wy = resample_weights(h, out_h);
    let wx = resample_weights(w, out_w);

    // rows first
    let mut tmp = Array3::<f64>::zeros((out_h, w, c));
    for (i, taps) in wy.iter().enumerate() {
        for &(src, wt) in taps {
            for j in 0..w {
                for k in 0..c {
                    tmp[[i, j, k]] += wt * img.pixels[[src, j, k]];
                }
            }
        }
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for (j, taps) in wx.iter().enumerate() {
        for &(src, wt) in taps {
            for i in 0..out_h {
                for k in 0..c {
                    out[[i, j, k]] += wt * tmp[[i, src, k]];
                }
            }
        }
    }
    Image {
        pixels: out,
        color_space: img.color_space,
        source_path: img.source_path.clone(),
    }
}

/// Bicubic resize clamped into `[0, 1]`.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    resize_raw(img, out_h, out_w).clamp()
}

pub fn check_scale(scale: usize) -> Result<()> {
    if ALLOWED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "scale {scale} unsupported (allowed: {ALLOWED_SCALES:?})"
        )))
    }
}

/// Antialiased bicubic downsampling by an integer factor.
///
/// The input is first center-cropped to the largest size divisible by
/// `scale` so output dimensions are exact.
pub fn bicubic_downsample(img: &Image, scale: usize) -> Result<Image> {
    check_scale(scale)?;
    let img = img.center_crop_divisible(scale)?;
    let (h, w, _) = img.pixels.dim();
    Ok(resize(&img, h / scale, w / scale))
}

/// Bicubic upsampling by an integer factor (no antialias widening).
pub fn bicubic_upsample(img: &Image, scale: usize) -> Result<Image> {
    check_scale(scale)?;
    let (h, w, _) = img.pixels.dim();
    Ok(resize(img, h * scale, w * scale))
}

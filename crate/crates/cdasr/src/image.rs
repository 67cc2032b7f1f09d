//! Image container used throughout the pipeline.
//!
//! Pixels are stored as `(H, W, C)` arrays of `f64` in `[0, 1]`. Loading and
//! saving clamp at the boundary so downstream code can rely on the range.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Luma weights (ITU-R BT.601), the convention used by SR benchmarks.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Y,
}

#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Array3<f64>,
    pub color_space: ColorSpace,
    pub source_path: Option<PathBuf>,
}

impl Image {
    pub fn new(pixels: Array3<f64>, color_space: ColorSpace) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("image must have H >= 1 and W >= 1"));
        }
        match (color_space, c) {
            (ColorSpace::Rgb, 3) | (ColorSpace::Y, 1) => {}
            _ => {
                return Err(Error::invalid(format!(
                    "channel count {c} does not match color space {color_space:?}"
                )))
            }
        }
        Ok(Image {
            pixels,
            color_space,
            source_path: None,
        })
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        let cs = if c == 1 { ColorSpace::Y } else { ColorSpace::Rgb };
        Image {
            pixels: Array3::from_elem((h, w, c), value),
            color_space: cs,
            source_path: None,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Clamp every pixel into `[0, 1]` in place.
    pub fn clamp(mut self) -> Self {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    /// BT.601 luma plane. Y images pass through unchanged.
    pub fn to_luma(&self) -> Image {
        if self.channels() == 1 {
            return self.clone();
        }
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::zeros((h, w, 1));
        Zip::indexed(&mut out).for_each(|(i, j, _), o| {
            *o = LUMA_WEIGHTS[0] * self.pixels[[i, j, 0]]
                + LUMA_WEIGHTS[1] * self.pixels[[i, j, 1]]
                + LUMA_WEIGHTS[2] * self.pixels[[i, j, 2]];
        });
        Image {
            pixels: out,
            color_space: ColorSpace::Y,
            source_path: self.source_path.clone(),
        }
    }

    /// Replicate a single-channel image to three channels; RGB passes through.
    pub fn to_rgb(&self) -> Image {
        if self.channels() == 3 {
            return self.clone();
        }
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                let v = self.pixels[[i, j, 0]];
                out[[i, j, 0]] = v;
                out[[i, j, 1]] = v;
                out[[i, j, 2]] = v;
            }
        }
        Image {
            pixels: out,
            color_space: ColorSpace::Rgb,
            source_path: self.source_path.clone(),
        }
    }

    /// Largest centered crop whose sides are divisible by `divisor`.
    pub fn center_crop_divisible(&self, divisor: usize) -> Result<Image> {
        let (h, w, c) = self.pixels.dim();
        let new_h = (h / divisor) * divisor;
        let new_w = (w / divisor) * divisor;
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} smaller than divisor {divisor}"
            )));
        }
        let top = (h - new_h) / 2;
        let left = (w - new_w) / 2;
        let cropped = self
            .pixels
            .slice(ndarray::s![top..top + new_h, left..left + new_w, ..])
            .to_owned();
        Ok(Image {
            pixels: cropped.into_shape_with_order((new_h, new_w, c)).unwrap(),
            color_space: self.color_space,
            source_path: self.source_path.clone(),
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height() || left + w > self.width() {
            return Err(Error::invalid("crop region out of bounds"));
        }
        let cropped = self
            .pixels
            .slice(ndarray::s![top..top + h, left..left + w, ..])
            .to_owned();
        Ok(Image {
            pixels: cropped,
            color_space: self.color_space,
            source_path: self.source_path.clone(),
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w, c) = self.pixels.dim();
        let mut out = Array3::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[[i, j, k]] = self.pixels[[i, w - 1 - j, k]];
                }
            }
        }
        Image {
            pixels: out,
            color_space: self.color_space,
            source_path: self.source_path.clone(),
        }
    }

    /// Rotate 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Image {
        let (h, w, c) = self.pixels.dim();
        let mut out = Array3::zeros((w, h, c));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[[w - 1 - j, i, k]] = self.pixels[[i, j, k]];
                }
            }
        }
        Image {
            pixels: out,
            color_space: self.color_space,
            source_path: self.source_path.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in rgb.enumerate_pixels() {
            for k in 0..3 {
                pixels[[y as usize, x as usize, k]] = f64::from(p.0[k]) / 255.0;
            }
        }
        Ok(Image {
            pixels,
            color_space: ColorSpace::Rgb,
            source_path: Some(path.to_path_buf()),
        })
    }

    /// Save as PNG. Values are clamped and rounded to 8-bit.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb();
        let (h, w, _) = rgb.pixels.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = [
                    to_u8(rgb.pixels[[i, j, 0]]),
                    to_u8(rgb.pixels[[i, j, 1]]),
                    to_u8(rgb.pixels[[i, j, 2]]),
                ];
                buf.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.dim(), other.pixels.dim());
        let mut m = 0.0f64;
        Zip::from(&self.pixels).and(&other.pixels).for_each(|a, b| {
            m = m.max((a - b).abs());
        });
        m
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(H,W,C)` to `(C,H,W)`; network code works channel-first.
pub fn hwc_to_chw(a: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = a.dim();
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[[k, i, j]] = a[[i, j, k]];
            }
        }
    }
    out
}

/// `(C,H,W)` back to image layout `(H,W,C)`.
pub fn chw_to_hwc(a: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = a.dim();
    let mut out = Array3::zeros((h, w, c));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[i, j, k]] = a[[k, i, j]];
            }
        }
    }
    out
}

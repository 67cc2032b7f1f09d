//! PSNR and SSIM under the benchmark evaluation protocol.
//!
//! The default protocol follows the convention of the cited baselines:
//! metrics on the BT.601 luma channel after cropping a border of `scale`
//! pixels from every side. A plain full-frame RGB protocol is available for
//! diagnostics. Both inputs always receive identical treatment (clamping is
//! the caller's job, cropping and luma conversion happen here).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{forward, NetworkConfig, ParameterSet};

/// Sentinel for zero-MSE comparisons, keeping CSV outputs finite.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Metric evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// BT.601 luma with a `scale`-pixel border crop on every side.
    YChannelCropped { scale: usize },
    /// Full-frame RGB, no crop. SSIM still evaluates on luma; its windowed
    /// statistics are defined on a single plane.
    RgbFull,
}

/// Aggregate metrics over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub protocol: Protocol,
}

/// Per-image metric row for the eval CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn require_same_dims(pred: &Image, target: &Image) -> Result<()> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::invalid(format!(
            "metric inputs disagree: prediction {}x{}, target {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Luma plane with the protocol's border crop applied, as a 2-d array.
fn luma_plane(img: &Image, crop: usize) -> Result<Array2<f64>> {
    let y = img.to_luma();
    let (h, w) = (y.height(), y.width());
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::invalid(format!(
            "{h}x{w} image vanishes under a {crop}-pixel border crop"
        )));
    }
    let cropped = y.crop(crop, crop, h - 2 * crop, w - 2 * crop)?;
    let (ch, cw) = (cropped.height(), cropped.width());
    let mut out = Array2::zeros((ch, cw));
    for i in 0..ch {
        for j in 0..cw {
            out[[i, j]] = cropped.pixels[[i, j, 0]];
        }
    }
    Ok(out)
}

fn crop_of(protocol: Protocol) -> usize {
    match protocol {
        Protocol::YChannelCropped { scale } => scale,
        Protocol::RgbFull => 0,
    }
}

/// Peak signal-to-noise ratio in dB for pixel range [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, target: &Image, protocol: Protocol) -> Result<f64> {
    require_same_dims(pred, target)?;
    let mse = match protocol {
        Protocol::YChannelCropped { scale } => {
            let a = luma_plane(pred, scale)?;
            let b = luma_plane(target, scale)?;
            let n = a.len() as f64;
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        }
        Protocol::RgbFull => {
            let a = pred.to_rgb();
            let b = target.to_rgb();
            let n = a.pixels.len() as f64;
            a.pixels
                .iter()
                .zip(b.pixels.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        }
    };
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Array2<f64> {
    let mut w = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let c = (SSIM_WINDOW / 2) as f64;
    let two_sigma_sq = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            w[[i, j]] = (-(di * di + dj * dj) / two_sigma_sq).exp();
        }
    }
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

/// Single-scale SSIM over the luma channel: 11x11 Gaussian window with
/// sigma 1.5, k1 = 0.01, k2 = 0.03, dynamic range 1, valid windows only.
pub fn ssim(pred: &Image, target: &Image, protocol: Protocol) -> Result<f64> {
    require_same_dims(pred, target)?;
    let crop = crop_of(protocol);
    let a = luma_plane(pred, crop)?;
    let b = luma_plane(target, crop)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{h}x{w} plane is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - SSIM_WINDOW) {
        for left in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wv = win[[i, j]];
                    let x = a[[top + i, left + j]];
                    let y = b[[top + i, left + j]];
                    mu_a += wv * x;
                    mu_b += wv * y;
                    aa += wv * x * x;
                    bb += wv * y * y;
                    ab += wv * x * y;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            sum += val;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Runs the network over every pair, clamps outputs to [0, 1], and averages
/// PSNR/SSIM against the HR images. The per-image rows come back alongside
/// the aggregate for CSV output.
pub fn evaluate_detailed(
    params: &ParameterSet,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    ds: &PairedDataset,
    protocol: Protocol,
) -> Result<(MetricReport, Vec<ImageMetric>)> {
    net_cfg.validate()?;
    if ds.pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to evaluate".into()));
    }
    if ds.scale != net_cfg.scale {
        return Err(Error::invalid(format!(
            "dataset is a x{} set but the network is configured for x{}",
            ds.scale, net_cfg.scale
        )));
    }
    let mut rows = Vec::with_capacity(ds.pairs.len());
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (idx, pair) in ds.pairs.iter().enumerate() {
        let emb = enc.encode(&pair.lr)?;
        let pred = forward(params, net_cfg, &pair.lr, &emb)?.clamp();
        let hr = pair.hr.to_rgb();
        let p = psnr(&pred, &hr, protocol)?;
        let s = ssim(&pred, &hr, protocol)?;
        psnr_sum += p;
        ssim_sum += s;
        let image = pair
            .hr
            .source_path
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("pair_{idx:04}"));
        rows.push(ImageMetric {
            image,
            psnr_db: p,
            ssim: s,
        });
    }
    let n = ds.pairs.len();
    let report = MetricReport {
        psnr_db: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        n_images: n,
        protocol,
    };
    Ok((report, rows))
}

/// Aggregate-only variant of [`evaluate_detailed`].
pub fn evaluate(
    params: &ParameterSet,
    net_cfg: &NetworkConfig,
    enc: &Encoder,
    ds: &PairedDataset,
    protocol: Protocol,
) -> Result<MetricReport> {
    Ok(evaluate_detailed(params, net_cfg, enc, ds, protocol)?.0)
}

fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes per-image rows under the headers `image,psnr,ssim`, followed by
/// one `mean` summary row carrying the dataset averages.
pub fn write_eval_csv(
    path: &std::path::Path,
    rows: &[ImageMetric],
    summary: &MetricReport,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image", "psnr", "ssim"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.image.as_str(),
            &format!("{}", r.psnr_db),
            &format!("{}", r.ssim),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.write_record([
        "mean",
        &format!("{}", summary.psnr_db),
        &format!("{}", summary.ssim),
    ])
    .map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImagePair;
    use crate::encoder::EncoderSpec;
    use crate::network::init_network;
    use crate::resample::{bicubic_downsample, bicubic_upsample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::constant(h, w, 3, 0.0);
        img.pixels.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        img
    }

    fn textured(h: usize, w: usize) -> Image {
        let mut img = Image::constant(h, w, 3, 0.0);
        for i in 0..h {
            for j in 0..w {
                let x = i as f64 / h as f64;
                let y = j as f64 / w as f64;
                img.pixels[[i, j, 0]] = 0.5 + 0.45 * (13.0 * x + 7.0 * y).sin();
                img.pixels[[i, j, 1]] = 0.5 + 0.45 * (5.0 * x * y).cos();
                img.pixels[[i, j, 2]] = (x + y) / 2.0;
            }
        }
        img
    }

    #[test]
    fn identical_images_hit_the_psnr_cap() {
        let img = rand_img(16, 16, 1);
        for proto in [Protocol::RgbFull, Protocol::YChannelCropped { scale: 2 }] {
            assert_eq!(psnr(&img, &img, proto).unwrap(), PSNR_CAP_DB);
        }
    }

    #[test]
    fn flat_half_gray_psnr_matches_the_closed_form() {
        let zeros = Image::constant(8, 8, 3, 0.0);
        let half = Image::constant(8, 8, 3, 0.5);
        let got = psnr(&zeros, &half, Protocol::RgbFull).unwrap();
        let expected = 20.0 * (1.0f64 / 0.5).log10();
        assert!((got - expected).abs() < 1e-9, "got {got}, want {expected}");
        assert!((got - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn random_pair_matches_an_independent_mse_oracle() {
        let a = rand_img(8, 8, 2);
        let b = rand_img(8, 8, 3);

        let mut sq = 0.0;
        for v in a.pixels.iter().zip(b.pixels.iter()).map(|(x, y)| x - y) {
            sq += v * v;
        }
        let oracle_rgb = 10.0 * (192.0 / sq).log10();
        let got_rgb = psnr(&a, &b, Protocol::RgbFull).unwrap();
        assert!((got_rgb - oracle_rgb).abs() < 1e-9);

        // luma protocol with a 2-pixel crop leaves a 4x4 plane
        let weights = [0.299, 0.587, 0.114];
        let mut sq_y = 0.0;
        for i in 2..6 {
            for j in 2..6 {
                let ya: f64 = (0..3).map(|c| weights[c] * a.pixels[[i, j, c]]).sum();
                let yb: f64 = (0..3).map(|c| weights[c] * b.pixels[[i, j, c]]).sum();
                sq_y += (ya - yb) * (ya - yb);
            }
        }
        let oracle_y = 10.0 * (16.0 / sq_y).log10();
        let got_y = psnr(&a, &b, Protocol::YChannelCropped { scale: 2 }).unwrap();
        assert!((got_y - oracle_y).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_mismatched_dims() {
        let a = Image::constant(8, 8, 3, 0.0);
        let b = Image::constant(8, 10, 3, 0.0);
        assert!(psnr(&a, &b, Protocol::RgbFull).is_err());
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let img = textured(16, 16);
        let got = ssim(&img, &img, Protocol::RgbFull).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "got {got}");
    }

    /// Independent reference: same formula assembled from scratch with its
    /// own window construction and loop structure.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let ya = a.to_luma();
        let yb = b.to_luma();
        let (h, w) = (ya.height(), ya.width());
        let mut kernel = vec![vec![0.0f64; 11]; 11];
        let mut ksum = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                *k = (-d2 / 4.5).exp();
                ksum += *k;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut vals = Vec::new();
        for t in 0..=(h - 11) {
            for l in 0..=(w - 11) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / ksum;
                        let x = ya.pixels[[t + i, l + j, 0]];
                        let y = yb.pixels[[t + i, l + j, 0]];
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                vals.push(
                    ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn inverted_texture_scores_below_half_and_matches_the_reference() {
        let target = textured(16, 16);
        let mut pred = target.clone();
        pred.pixels.mapv_inplace(|v| 1.0 - v);
        let got = ssim(&pred, &target, Protocol::RgbFull).unwrap();
        assert!(got < 0.5, "inverted texture should score low, got {got}");
        let reference = reference_ssim(&pred, &target);
        assert!(
            (got - reference).abs() < 1e-12,
            "got {got}, reference {reference}"
        );
    }

    #[test]
    fn constant_planes_match_the_luminance_closed_form() {
        let a = Image::constant(12, 12, 3, 0.3);
        let b = Image::constant(12, 12, 3, 0.5);
        let got = ssim(&a, &b, Protocol::RgbFull).unwrap();
        let c1 = 1e-4;
        let expected = (2.0 * 0.3 * 0.5 + c1) / (0.3f64.powi(2) + 0.5f64.powi(2) + c1);
        assert!((got - expected).abs() < 1e-6, "got {got}, want {expected}");
    }

    #[test]
    fn ssim_rejects_planes_smaller_than_the_window() {
        let a = Image::constant(10, 10, 3, 0.5);
        assert!(ssim(&a, &a, Protocol::RgbFull).is_err());
        // 16x16 shrinks to 8x8 under a 4-pixel crop
        let b = Image::constant(16, 16, 3, 0.5);
        assert!(ssim(&b, &b, Protocol::YChannelCropped { scale: 4 }).is_err());
    }

    #[test]
    fn protocol_and_report_serde_round_trip() {
        let report = MetricReport {
            psnr_db: 31.5,
            ssim: 0.87,
            n_images: 5,
            protocol: Protocol::YChannelCropped { scale: 4 },
        };
        let j = serde_json::to_string(&report).unwrap();
        assert!(j.contains("y_channel_cropped"));
        let back: MetricReport = serde_json::from_str(&j).unwrap();
        assert_eq!(back, report);
        let rgb: Protocol = serde_json::from_str(r#""rgb_full""#).unwrap();
        assert_eq!(rgb, Protocol::RgbFull);
    }

    fn eval_ds(n: usize) -> PairedDataset {
        let mut pairs = Vec::new();
        for idx in 0..n {
            let hr = rand_img(32, 32, 40 + idx as u64);
            let lr = bicubic_downsample(&hr, 2).unwrap();
            pairs.push(ImagePair { lr, hr });
        }
        PairedDataset {
            pairs,
            scale: 2,
            domain_tag: "eval".into(),
        }
    }

    #[test]
    fn fresh_network_evaluation_equals_the_bicubic_baseline() {
        let net = NetworkConfig {
            scale: 2,
            backbone_channels: 4,
            backbone_blocks: 1,
            clip_dim: 8,
            mlp_hidden: 8,
            mlp_out: 6,
            recon_blocks_per_stage: 1,
        };
        let params = init_network(&net, 0).unwrap();
        let enc = Encoder::load(&EncoderSpec::stub_with_dim(8)).unwrap();
        let ds = eval_ds(3);
        let proto = Protocol::YChannelCropped { scale: 2 };
        let report = evaluate(&params, &net, &enc, &ds, proto).unwrap();

        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for pair in &ds.pairs {
            let baseline = bicubic_upsample(&pair.lr, 2).unwrap().clamp();
            psnr_sum += psnr(&baseline, &pair.hr.to_rgb(), proto).unwrap();
            ssim_sum += ssim(&baseline, &pair.hr.to_rgb(), proto).unwrap();
        }
        assert_eq!(report.psnr_db, psnr_sum / 3.0);
        assert_eq!(report.ssim, ssim_sum / 3.0);
        assert_eq!(report.n_images, 3);
    }

    #[test]
    fn detailed_rows_average_to_the_report() {
        let net = NetworkConfig {
            scale: 2,
            backbone_channels: 4,
            backbone_blocks: 1,
            clip_dim: 8,
            mlp_hidden: 8,
            mlp_out: 6,
            recon_blocks_per_stage: 1,
        };
        let params = init_network(&net, 1).unwrap();
        let enc = Encoder::load(&EncoderSpec::stub_with_dim(8)).unwrap();
        let ds = eval_ds(4);
        let (report, rows) =
            evaluate_detailed(&params, &net, &enc, &ds, Protocol::RgbFull).unwrap();
        assert_eq!(rows.len(), 4);
        let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / 4.0;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / 4.0;
        assert!((report.psnr_db - mean_psnr).abs() < 1e-12);
        assert!((report.ssim - mean_ssim).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.image.starts_with("pair_")));
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_datasets() {
        let net = NetworkConfig {
            scale: 2,
            backbone_channels: 4,
            backbone_blocks: 1,
            clip_dim: 8,
            mlp_hidden: 8,
            mlp_out: 6,
            recon_blocks_per_stage: 1,
        };
        let params = init_network(&net, 0).unwrap();
        let enc = Encoder::load(&EncoderSpec::stub_with_dim(8)).unwrap();
        let empty = PairedDataset {
            pairs: Vec::new(),
            scale: 2,
            domain_tag: "empty".into(),
        };
        assert!(matches!(
            evaluate(&params, &net, &enc, &empty, Protocol::RgbFull),
            Err(Error::EmptyDataset(_))
        ));
        let mut ds = eval_ds(1);
        ds.scale = 4;
        assert!(evaluate(&params, &net, &enc, &ds, Protocol::RgbFull).is_err());
    }

    #[test]
    fn eval_csv_has_image_rows_and_a_mean_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let rows = vec![
            ImageMetric { image: "a.png".into(), psnr_db: 30.5, ssim: 0.9 },
            ImageMetric { image: "b.png".into(), psnr_db: 28.0, ssim: 0.8 },
        ];
        let summary = MetricReport {
            psnr_db: 29.25,
            ssim: 0.85,
            n_images: 2,
            protocol: Protocol::RgbFull,
        };
        write_eval_csv(&path, &rows, &summary).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image,psnr,ssim");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("a.png,30.5"));
        assert_eq!(lines[3], "mean,29.25,0.85");
    }
}

//! Paired LR/HR dataset construction and the on-disk degraded-set layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample::{bicubic_downsample, ALLOWED_SCALES};

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub lr: Image,
    pub hr: Image,
}

/// Ordered LR/HR pairs at a fixed scale. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
    pub domain_tag: String,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn min_lr_dims(&self) -> (usize, usize) {
        let mut h = usize::MAX;
        let mut w = usize::MAX;
        for p in &self.pairs {
            h = h.min(p.lr.height());
            w = w.min(p.lr.width());
        }
        (h, w)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub skipped: Vec<PathBuf>,
}

impl BuildReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// All image files below `dir`, sorted by relative path for a deterministic
/// pair order.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if is_image_file(&path) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    Ok(files)
}

fn check_scale(scale: usize) -> Result<()> {
    if ALLOWED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "scale {scale} unsupported (allowed: {ALLOWED_SCALES:?})"
        )))
    }
}

/// Build a dataset from an HR directory, synthesizing LR counterparts by
/// antialiased bicubic downsampling. HR images are center-cropped to
/// dimensions divisible by `scale` first. Undecodable files are skipped with
/// a warning and counted in the report.
pub fn build_dataset(hr_dir: &Path, scale: usize) -> Result<(PairedDataset, BuildReport)> {
    check_scale(scale)?;
    let files = list_image_files(hr_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no image files in {}",
            hr_dir.display()
        )));
    }
    let mut pairs = Vec::new();
    let mut report = BuildReport::default();
    for path in files {
        match Image::load(&path) {
            Ok(hr_raw) => {
                let hr = hr_raw.center_crop_divisible(scale)?;
                let lr = bicubic_downsample(&hr, scale)?;
                pairs.push(ImagePair { lr, hr });
            }
            Err(e) => {
                log::warn!("skipping undecodable file {}: {e}", path.display());
                report.skipped.push(path);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {}",
            hr_dir.display()
        )));
    }
    let domain_tag = hr_dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((
        PairedDataset {
            pairs,
            scale,
            domain_tag,
        },
        report,
    ))
}

/// Build a dataset from separate HR and LR directories, pairing files by
/// their path relative to each root. LR dimensions must match `hr / scale`.
pub fn build_dataset_from_dirs(
    hr_dir: &Path,
    lr_dir: &Path,
    scale: usize,
) -> Result<(PairedDataset, BuildReport)> {
    check_scale(scale)?;
    let hr_files = list_image_files(hr_dir)?;
    if hr_files.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no image files in {}",
            hr_dir.display()
        )));
    }
    let mut pairs = Vec::new();
    let mut report = BuildReport::default();
    for hr_path in hr_files {
        let rel = hr_path.strip_prefix(hr_dir).unwrap();
        let lr_path = lr_dir.join(rel);
        let hr = match Image::load(&hr_path) {
            Ok(img) => img.center_crop_divisible(scale)?,
            Err(e) => {
                log::warn!("skipping undecodable file {}: {e}", hr_path.display());
                report.skipped.push(hr_path);
                continue;
            }
        };
        let lr = match Image::load(&lr_path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping pair without LR {}: {e}", lr_path.display());
                report.skipped.push(lr_path);
                continue;
            }
        };
        if lr.height() * scale != hr.height() || lr.width() * scale != hr.width() {
            return Err(Error::invalid(format!(
                "LR {}x{} does not match HR {}x{} at scale {scale} for {}",
                lr.height(),
                lr.width(),
                hr.height(),
                hr.width(),
                hr_path.display()
            )));
        }
        pairs.push(ImagePair { lr, hr });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable pairs under {}",
            hr_dir.display()
        )));
    }
    let domain_tag = hr_dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((
        PairedDataset {
            pairs,
            scale,
            domain_tag,
        },
        report,
    ))
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub hr: String,
    pub lr: String,
    pub hr_height: usize,
    pub hr_width: usize,
}

/// JSON manifest written next to a degraded set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scale: usize,
    pub domain_tag: String,
    pub skip_count: usize,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json(bytes: &[u8]) -> Result<Manifest> {
        let manifest: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(format!("manifest parse error: {e}")))?;
        if !ALLOWED_SCALES.contains(&manifest.scale) {
            return Err(Error::Config(format!(
                "manifest scale {} unsupported",
                manifest.scale
            )));
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Write the degraded mirror of `hr_dir` under `<out>/X<scale>/` and return
/// the manifest describing it.
pub fn write_degraded_set(hr_dir: &Path, scale: usize, out: &Path) -> Result<Manifest> {
    check_scale(scale)?;
    let files = list_image_files(hr_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no image files in {}",
            hr_dir.display()
        )));
    }
    let lr_root = out.join(format!("X{scale}"));
    let mut entries = Vec::new();
    let mut skip_count = 0;
    for hr_path in files {
        let rel = hr_path.strip_prefix(hr_dir).unwrap();
        let hr = match Image::load(&hr_path) {
            Ok(img) => img.center_crop_divisible(scale)?,
            Err(e) => {
                log::warn!("skipping undecodable file {}: {e}", hr_path.display());
                skip_count += 1;
                continue;
            }
        };
        let lr = bicubic_downsample(&hr, scale)?;
        let mut lr_path = lr_root.join(rel);
        lr_path.set_extension("png");
        if let Some(parent) = lr_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        lr.save_png(&lr_path)?;
        entries.push(ManifestEntry {
            hr: hr_path.display().to_string(),
            lr: lr_path.display().to_string(),
            hr_height: hr.height(),
            hr_width: hr.width(),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {}",
            hr_dir.display()
        )));
    }
    let manifest = Manifest {
        scale,
        domain_tag: hr_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string(),
        skip_count,
        pairs: entries,
    };
    let manifest_path = out.join(format!("manifest_X{scale}.json"));
    fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::Io {
        path: manifest_path,
        source: e,
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn write_test_images(dir: &Path, count: usize, size: usize) {
        for idx in 0..count {
            let mut img = Image::constant(size, size, 3, 0.0);
            for i in 0..size {
                for j in 0..size {
                    img.pixels[[i, j, 0]] = ((i + j + idx) % 7) as f64 / 6.0;
                    img.pixels[[i, j, 1]] = (i % 5) as f64 / 4.0;
                    img.pixels[[i, j, 2]] = (j % 3) as f64 / 2.0;
                }
            }
            img.save_png(&dir.join(format!("img_{idx:02}.png"))).unwrap();
        }
    }

    #[test]
    fn builds_pairs_with_exact_scale_relation() {
        let dir = tempfile::tempdir().unwrap();
        write_test_images(dir.path(), 3, 16);
        let (ds, report) = build_dataset(dir.path(), 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(report.skip_count(), 0);
        for p in &ds.pairs {
            assert_eq!(p.hr.height(), 2 * p.lr.height());
            assert_eq!(p.hr.width(), 2 * p.lr.width());
        }
    }

    #[test]
    fn five_image_benchmark_dir_yields_five_pairs() {
        let dir = tempfile::tempdir().unwrap();
        write_test_images(dir.path(), 5, 32);
        let (ds, _) = build_dataset(dir.path(), 4).unwrap();
        assert_eq!(ds.len(), 5);
    }

    #[test]
    fn corrupt_file_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_test_images(dir.path(), 1, 16);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let (ds, report) = build_dataset(dir.path(), 2).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.skip_count(), 1);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(dir.path(), 2),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn degraded_set_writes_mirror_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_test_images(dir.path(), 3, 16);
        let manifest = write_degraded_set(dir.path(), 2, out.path()).unwrap();
        assert_eq!(manifest.pairs.len(), 3);
        assert_eq!(manifest.scale, 2);
        for entry in &manifest.pairs {
            assert!(Path::new(&entry.lr).exists());
        }
        let manifest_path = out.path().join("manifest_X2.json");
        let loaded = Manifest::from_json(&std::fs::read(manifest_path).unwrap()).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let json = br#"{"scale":2,"domain_tag":"x","skip_count":0,"pairs":[],"extra":1}"#;
        assert!(Manifest::from_json(json).is_err());
    }
}

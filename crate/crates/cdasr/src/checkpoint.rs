//! Checkpoint archive: `CDSR` magic, a format version, one JSON metadata
//! record, and named little-endian `f64` arrays.
//!
//! The writer is deterministic (arrays in name order, no timestamps), so
//! saving a loaded checkpoint reproduces the original bytes. The reader
//! never trusts a length field before checking it against the remaining
//! input, which keeps allocations bounded by the file size.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{parameter_layout, NetworkConfig, ParameterSet};
use crate::optim::OptimizerState;

pub const MAGIC: [u8; 4] = *b"CDSR";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const MAX_NDIM: usize = 8;
const MOMENT1_PREFIX: &str = "opt.m.";
const MOMENT2_PREFIX: &str = "opt.v.";

/// Run identity stored alongside the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub cfg: NetworkConfig,
    pub encoder_id: String,
    pub seed: u64,
    pub step: u64,
    pub loss_weights: LossWeights,
}

/// A fully validated, loaded checkpoint. Gradient slots are not stored;
/// they come back zeroed.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub opt: Option<OptimizerState>,
}

fn write_array(out: &mut Vec<u8>, name: &str, arr: &ArrayD<f64>) {
    assert!(name.len() <= u16::MAX as usize, "array name too long");
    assert!(arr.ndim() <= MAX_NDIM, "array rank too high");
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(arr.ndim() as u8);
    for &d in arr.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_archive<'a>(
    meta_json: &[u8],
    arrays: impl ExactSizeIterator<Item = (&'a str, &'a ArrayD<f64>)>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_json);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, arr) in arrays {
        write_array(&mut out, name, arr);
    }
    out
}

/// Serialize a checkpoint. `opt`, when present, must agree with
/// `meta.step`, which is the single source of the step counter on reload.
pub fn checkpoint_bytes(
    meta: &CheckpointMeta,
    params: &ParameterSet,
    opt: Option<&OptimizerState>,
) -> Result<Vec<u8>> {
    meta.cfg.validate()?;
    if let Some(o) = opt {
        if o.step_count() != meta.step {
            return Err(Error::invalid(format!(
                "optimizer step {} disagrees with checkpoint step {}",
                o.step_count(),
                meta.step
            )));
        }
    }
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let mut arrays: Vec<(String, &ArrayD<f64>)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), &p.value))
        .collect();
    if let Some(o) = opt {
        for (name, m, v) in o.moments() {
            arrays.push((format!("{MOMENT1_PREFIX}{name}"), m));
            arrays.push((format!("{MOMENT2_PREFIX}{name}"), v));
        }
    }
    Ok(write_archive(
        &meta_json,
        arrays.iter().map(|(n, a)| (n.as_str(), *a)),
    ))
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParameterSet,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    let bytes = checkpoint_bytes(meta, params, opt)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::CheckpointTruncated(format!(
                "{what} needs {n} bytes, {left} left"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len_field(&mut self, what: &str) -> Result<usize> {
        let raw = self.u64(what)?;
        usize::try_from(raw).map_err(|_| {
            Error::CheckpointMalformed(format!("{what} {raw} does not fit in memory"))
        })
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_arrays(r: &mut Reader, count: usize) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut out = BTreeMap::new();
    for i in 0..count {
        let ctx = format!("array {i}");
        let name_len = r.u16(&format!("{ctx} name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("{ctx} name"))?)
            .map_err(|_| Error::CheckpointMalformed(format!("{ctx} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8(&format!("{ctx} dtype"))?;
        if dtype != DTYPE_F64 {
            return Err(Error::CheckpointMalformed(format!(
                "array `{name}` has unknown dtype {dtype}"
            )));
        }
        let ndim = r.u8(&format!("{ctx} rank"))? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::CheckpointMalformed(format!(
                "array `{name}` has rank {ndim}, cap is {MAX_NDIM}"
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut elems = 1usize;
        for d in 0..ndim {
            let dim = r.len_field(&format!("{ctx} dim {d}"))?;
            elems = elems.checked_mul(dim).ok_or_else(|| {
                Error::CheckpointMalformed(format!("array `{name}` element count overflows"))
            })?;
            dims.push(dim);
        }
        let byte_len = elems.checked_mul(8).ok_or_else(|| {
            Error::CheckpointMalformed(format!("array `{name}` byte length overflows"))
        })?;
        let data = r.take(byte_len, &format!("{ctx} data"))?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values)
            .expect("length matches shape product");
        if out.insert(name.clone(), arr).is_some() {
            return Err(Error::CheckpointMalformed(format!(
                "duplicate array name `{name}`"
            )));
        }
    }
    Ok(out)
}

/// Parse and validate a checkpoint from raw bytes.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: version,
        });
    }
    let meta_len = r.len_field("meta length")?;
    let meta_json = r.take(meta_len, "meta record")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_json)
        .map_err(|e| Error::CheckpointMalformed(format!("meta record: {e}")))?;
    meta.cfg
        .validate()
        .map_err(|e| Error::CheckpointMalformed(format!("meta config: {e}")))?;
    meta.loss_weights
        .validate()
        .map_err(|e| Error::CheckpointMalformed(format!("meta loss weights: {e}")))?;

    let count = r.len_field("array count")?;
    let mut arrays = read_arrays(&mut r, count)?;
    if r.remaining() != 0 {
        return Err(Error::CheckpointMalformed(format!(
            "{} trailing bytes after the last array",
            r.remaining()
        )));
    }

    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut params = ParameterSet::new();
    let layout = parameter_layout(&meta.cfg);
    for (name, shape, _) in &layout {
        let arr = arrays.remove(name).ok_or_else(|| {
            Error::CheckpointMalformed(format!("parameter `{name}` missing from archive"))
        })?;
        if arr.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: arr.shape().to_vec(),
            });
        }
        params.insert(name, arr);
    }
    for (name, arr) in arrays {
        if let Some(stripped) = name.strip_prefix(MOMENT1_PREFIX) {
            first.insert(stripped.to_string(), arr);
        } else if let Some(stripped) = name.strip_prefix(MOMENT2_PREFIX) {
            second.insert(stripped.to_string(), arr);
        } else {
            return Err(Error::CheckpointMalformed(format!(
                "unexpected array `{name}` in archive"
            )));
        }
    }
    let opt = if first.is_empty() && second.is_empty() {
        None
    } else {
        Some(
            OptimizerState::from_parts(meta.step, first, second, &params).map_err(
                |e| match e {
                    Error::ShapeMismatch { .. } => e,
                    other => Error::CheckpointMalformed(other.to_string()),
                },
            )?,
        )
    };
    Ok(Checkpoint { meta, params, opt })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_checkpoint_bytes(&bytes)
}

//! Deterministic patch and episode sampling.
//!
//! Every sampler is a pure function of its inputs and an explicit seed, so
//! repeated calls are bit-identical and training can be resumed by replaying
//! per-step seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImagePair, PairedDataset};
use crate::error::{Error, Result};
use crate::image::Image;

/// Dihedral augmentation: two flip states times four 90-degree rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Augmentation {
    pub flip: bool,
    pub rotations: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        rotations: 0,
    };

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        for _ in 0..self.rotations {
            out = out.rot90();
        }
        out
    }
}

/// One sampled training example with its provenance.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub lr_patch: Image,
    pub hr_patch: Image,
    pub pair_index: usize,
    pub top: usize,
    pub left: usize,
    pub augment: Augmentation,
}

/// Draw `batch` co-located LR/HR patch pairs with random flip/rot90
/// augmentation. Fully determined by `rng_seed`.
pub fn sample_patch_batch(
    ds: &PairedDataset,
    patch: usize,
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<PatchSample>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let (min_h, min_w) = ds.min_lr_dims();
    if patch == 0 || patch > min_h || patch > min_w {
        return Err(Error::invalid(format!(
            "patch {patch} exceeds smallest LR dims {min_h}x{min_w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scale = ds.scale;
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair_index = rng.gen_range(0..ds.pairs.len());
        let pair = &ds.pairs[pair_index];
        let top = rng.gen_range(0..=pair.lr.height() - patch);
        let left = rng.gen_range(0..=pair.lr.width() - patch);
        let augment = Augmentation {
            flip: rng.gen_bool(0.5),
            rotations: rng.gen_range(0..4u8),
        };
        let lr_patch = pair.lr.crop(top, left, patch, patch)?;
        let hr_patch = pair
            .hr
            .crop(top * scale, left * scale, patch * scale, patch * scale)?;
        out.push(PatchSample {
            lr_patch: augment.apply(&lr_patch),
            hr_patch: augment.apply(&hr_patch),
            pair_index,
            top,
            left,
            augment,
        });
    }
    Ok(out)
}

/// Like [`sample_patch_batch`] but without augmentation; crops only.
pub fn sample_patch_batch_plain(
    ds: &PairedDataset,
    patch: usize,
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<PatchSample>> {
    let mut samples = sample_patch_batch(ds, patch, batch, rng_seed)?;
    for s in &mut samples {
        if s.augment != Augmentation::IDENTITY {
            let pair = &ds.pairs[s.pair_index];
            s.lr_patch = pair.lr.crop(s.top, s.left, patch, patch)?;
            s.hr_patch = pair.hr.crop(
                s.top * ds.scale,
                s.left * ds.scale,
                patch * ds.scale,
                patch * ds.scale,
            )?;
            s.augment = Augmentation::IDENTITY;
        }
    }
    Ok(samples)
}

/// Index split of a dataset into disjoint support and query sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl EpisodeSplit {
    pub fn support_pairs<'a>(&self, ds: &'a PairedDataset) -> Vec<&'a ImagePair> {
        self.support.iter().map(|&i| &ds.pairs[i]).collect()
    }

    pub fn query_pairs<'a>(&self, ds: &'a PairedDataset) -> Vec<&'a ImagePair> {
        self.query.iter().map(|&i| &ds.pairs[i]).collect()
    }
}

/// Uniform sample without replacement of `shots + query_size` distinct
/// indices, split into support and query. Deterministic given seed.
pub fn sample_episode(
    ds: &PairedDataset,
    shots: usize,
    query_size: usize,
    rng_seed: u64,
) -> Result<EpisodeSplit> {
    let need = shots + query_size;
    if shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    if need > ds.pairs.len() {
        return Err(Error::invalid(format!(
            "need {need} pairs (shots {shots} + query {query_size}) but dataset has {}",
            ds.pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices: Vec<usize> = (0..ds.pairs.len()).collect();
    // partial Fisher-Yates: the first `need` slots become the sample
    for i in 0..need {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    Ok(EpisodeSplit {
        support: indices[..shots].to_vec(),
        query: indices[shots..need].to_vec(),
    })
}

/// Derives an independent seed for a numbered stream (a training step, an
/// episode) from a base seed. SplitMix64 finalizer, so nearby stream indices
/// still produce unrelated seeds and the mapping is stable across platforms.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

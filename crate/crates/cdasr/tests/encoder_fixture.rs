//! Checks the vision-transformer encoder against a reference embedding
//! produced by an independent implementation (see tools/gen_vit_fixture.py).

use ndarray::Array3;
use serde::Deserialize;

use cdasr::encoder::{Encoder, EncoderBackend, EncoderSpec, ENCODER_CACHE_ENV};
use cdasr::image::{ColorSpace, Image};
use cdasr::vit::VitWeights;

#[derive(Deserialize)]
struct Reference {
    pixels_hwc: Vec<Vec<Vec<f64>>>,
    embedding: Vec<f64>,
}

fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_clip")
}

fn load_reference() -> (Image, Vec<f64>) {
    let text = std::fs::read_to_string(fixture_dir().join("reference.json")).unwrap();
    let r: Reference = serde_json::from_str(&text).unwrap();
    let h = r.pixels_hwc.len();
    let w = r.pixels_hwc[0].len();
    let mut px = Array3::zeros((h, w, 3));
    for (i, row) in r.pixels_hwc.iter().enumerate() {
        for (j, p) in row.iter().enumerate() {
            for k in 0..3 {
                px[[i, j, k]] = p[k];
            }
        }
    }
    (Image::new(px, ColorSpace::Rgb).unwrap(), r.embedding)
}

#[test]
fn vit_matches_reference_implementation() {
    let weights = VitWeights::load(&fixture_dir().join("model.safetensors")).unwrap();
    assert_eq!(weights.cfg.width, 32);
    assert_eq!(weights.cfg.heads, 4);
    assert_eq!(weights.cfg.layers, 2);
    assert_eq!(weights.cfg.patch, 16);
    assert_eq!(weights.cfg.embed_dim, 24);

    let spec = EncoderSpec {
        backend: EncoderBackend::Pretrained,
        input_size: 32,
        embed_dim: 24,
    };
    let enc = Encoder::from_vit(&spec, weights).unwrap();
    let (img, expected) = load_reference();
    let got = enc.encode(&img).unwrap();

    // reference ran in 32-bit floats, ours runs in 64-bit
    let max_diff = got
        .values
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        max_diff < 5e-5,
        "embedding deviates from the reference by {max_diff}"
    );
}

#[test]
fn cache_env_loading_path_works() {
    // point the cache variable at the fixture directory and load through
    // the public entry point; sets the env only when no ambient value exists
    if std::env::var_os(ENCODER_CACHE_ENV).is_some() {
        return;
    }
    // SAFETY: test processes are single-threaded at this point only if
    // --test-threads=1; to stay safe under parallel tests, this test spawns
    // no threads and other tests in this binary never read the variable.
    unsafe { std::env::set_var(ENCODER_CACHE_ENV, fixture_dir()) };
    let spec = EncoderSpec {
        backend: EncoderBackend::Pretrained,
        input_size: 32,
        embed_dim: 24,
    };
    let enc = Encoder::load(&spec).unwrap();
    let (img, _) = load_reference();
    let e = enc.encode(&img).unwrap();
    let norm = e.values.dot(&e.values).sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    unsafe { std::env::remove_var(ENCODER_CACHE_ENV) };
}

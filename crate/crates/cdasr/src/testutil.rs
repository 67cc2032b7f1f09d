//! Test support: numerical gradient checking and procedural fixtures.
//!
//! The gradient checker differentiates a black-box closure by central
//! differences, so it shares no code with the tape's analytic rules and can
//! serve as an independent oracle for them.

use ndarray::{Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::image::{ColorSpace, Image};

/// Central-difference derivative of `f` at `x[idx]`.
///
/// `f` must be a pure function of the array contents.
pub fn numeric_partial<F>(f: &mut F, x: &ArrayD<f64>, idx: usize, h: f64) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut xp = x.clone();
    let mut xm = x.clone();
    *xp.iter_mut().nth(idx).unwrap() += h;
    *xm.iter_mut().nth(idx).unwrap() -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Compare an analytic gradient against central differences at every
/// coordinate. Tolerance is relative with an absolute floor. Coordinates
/// are visited in logical (row-major) order, so array memory layout does
/// not matter.
pub fn check_grad<F>(mut f: F, x: &ArrayD<f64>, analytic: &ArrayD<f64>, tol: f64)
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert_eq!(x.shape(), analytic.shape());
    for (idx, &ana) in analytic.iter().enumerate() {
        let num = numeric_partial(&mut f, x, idx, 1e-5);
        let scale = num.abs().max(ana.abs()).max(1.0);
        assert!(
            (num - ana).abs() <= tol * scale,
            "gradient mismatch at {idx}: numeric {num}, analytic {ana}"
        );
    }
}

/// Seeded array with entries uniform in `(-1, 1)`.
pub fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

/// Smooth procedural RGB test image: overlapping sinusoids per channel.
pub fn gradient_image(h: usize, w: usize, phase: f64) -> Image {
    let mut px = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let y = i as f64 / h.max(1) as f64;
            let x = j as f64 / w.max(1) as f64;
            px[[i, j, 0]] = 0.5 + 0.5 * (6.0 * x + phase).sin() * (3.0 * y).cos();
            px[[i, j, 1]] = 0.5 + 0.4 * (4.0 * (x + y) + 0.7 * phase).cos();
            px[[i, j, 2]] = 0.5 + 0.3 * (8.0 * y - phase).sin();
        }
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Image::new(px, ColorSpace::Rgb).unwrap()
}

/// Seeded noise image in `[0, 1]`.
pub fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = Array3::from_shape_simple_fn((h, w, 3), || rng.gen_range(0.0..1.0));
    Image::new(px, ColorSpace::Rgb).unwrap()
}

/// Order-independent summary of an array: element count, sum, sum of
/// absolute values, and extrema, formatted with enough digits to pin the
/// computation but not the last libm ulp.
pub fn array_digest(values: &ArrayD<f64>) -> String {
    let sum: f64 = values.iter().sum();
    let abs: f64 = values.iter().map(|v| v.abs()).sum();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "n={} sum={:.10e} abs={:.10e} min={:.10e} max={:.10e}",
        values.len(),
        sum,
        abs,
        min,
        max
    )
}

/// Compare `computed` against the checked-in golden file, or rewrite the
/// golden when the `CDASR_UPDATE_GOLDENS=1` environment variable is set.
pub fn check_golden(name: &str, computed: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/goldens")
        .join(name);
    if std::env::var("CDASR_UPDATE_GOLDENS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, format!("{}\n", computed.trim_end())).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!("golden {name} missing; regenerate with CDASR_UPDATE_GOLDENS=1")
    });
    assert_eq!(
        want.trim_end(),
        computed.trim_end(),
        "golden {name} drifted; regenerate with CDASR_UPDATE_GOLDENS=1 if intended"
    );
}

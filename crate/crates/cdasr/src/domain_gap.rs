//! Domain-gap diagnostics in semantic-embedding space.
//!
//! Quantifies the shift between image domains as the Maximum Mean
//! Discrepancy of their embedding distributions and projects pooled
//! embeddings to 2-D for inspection. The 2-D reduction is a seeded
//! stochastic neighbor embedding when enough points are available and a
//! principal-axes projection otherwise; which one ran is flagged in the
//! report, since SNE layouts and PCA scores are not comparable.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::list_image_files;
use crate::encoder::{Encoder, EncoderSpec, SemanticEmbedding};
use crate::error::{Error, Result};
use crate::image::Image;

/// Target perplexity of the stochastic neighbor embedding.
pub const TSNE_PERPLEXITY: f64 = 30.0;

/// Minimum pooled point count for the SNE path; below this the reduction
/// falls back to principal axes. The standard requirement is
/// `n - 1 >= 3 * perplexity`.
pub const TSNE_MIN_POINTS: usize = 91;

/// Kernel for the MMD estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Inner product. On unit-norm embeddings this is cosine geometry, and
    /// the MMD reduces to the distance between mean embeddings.
    Linear,
    /// Gaussian RBF; `sigma: None` selects the median pairwise distance of
    /// the pooled points.
    Rbf { sigma: Option<f64> },
}

/// Which 2-D reduction produced the coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Tsne,
    PrincipalAxes,
}

/// One 2-D point tagged with its dataset of origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordRow {
    pub x: f64,
    pub y: f64,
    pub tag: String,
}

/// Domain-gap summary: the headline MMD between the first two datasets,
/// the full pairwise matrix, and optional 2-D coordinates of every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGapReport {
    pub mmd: f64,
    pub kernel: Kernel,
    pub n_a: usize,
    pub n_b: usize,
    pub coords_2d: Option<Vec<CoordRow>>,
    pub tags: Vec<String>,
    /// Square matrix in tag order; diagonal is zero.
    pub mmd_matrix: Vec<Vec<f64>>,
    pub reduction: Reduction,
}

fn embedding_dim(sets: &[&[SemanticEmbedding]]) -> Result<usize> {
    let mut dim = None;
    for set in sets {
        for e in *set {
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d == e.dim() => {}
                Some(d) => {
                    return Err(Error::invalid(format!(
                        "embedding dims disagree: {d} vs {}",
                        e.dim()
                    )))
                }
            }
        }
    }
    dim.ok_or_else(|| Error::invalid("no embeddings given"))
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled points, the standard
/// RBF bandwidth heuristic. Returns 1.0 when degenerate (all points equal
/// or fewer than two points).
fn median_heuristic(pool: &[&Array1<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..pool.len() {
        for j in (i + 1)..pool.len() {
            dists.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Resolves `Rbf { sigma: None }` to the median heuristic over both sets.
pub fn resolve_kernel(a: &[SemanticEmbedding], b: &[SemanticEmbedding], kernel: Kernel) -> Kernel {
    match kernel {
        Kernel::Rbf { sigma: None } => {
            let pool: Vec<&Array1<f64>> =
                a.iter().chain(b.iter()).map(|e| &e.values).collect();
            Kernel::Rbf {
                sigma: Some(median_heuristic(&pool)),
            }
        }
        k => k,
    }
}

fn kernel_eval(kernel: Kernel, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    match kernel {
        Kernel::Linear => x.dot(y),
        Kernel::Rbf { sigma } => {
            let s = sigma.expect("sigma resolved before evaluation");
            (-sq_dist(x, y) / (2.0 * s * s)).exp()
        }
    }
}

/// Maximum Mean Discrepancy between two embedding samples.
///
/// Uses the unbiased U-statistic when both samples have at least two
/// points; singleton samples fall back to the biased V-statistic, whose
/// diagonal terms are then well defined. The squared estimate is floored at
/// zero before the square root, so `mmd(A, A)` is exactly zero.
pub fn mmd(a: &[SemanticEmbedding], b: &[SemanticEmbedding], kernel: Kernel) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("mmd requires two non-empty embedding sets"));
    }
    embedding_dim(&[a, b])?;
    let k = resolve_kernel(a, b, kernel);
    let m = a.len() as f64;
    let n = b.len() as f64;
    let unbiased = a.len() >= 2 && b.len() >= 2;

    let self_term = |set: &[SemanticEmbedding]| -> f64 {
        let len = set.len() as f64;
        let mut sum = 0.0;
        for i in 0..set.len() {
            for j in 0..set.len() {
                if unbiased && i == j {
                    continue;
                }
                sum += kernel_eval(k, &set[i].values, &set[j].values);
            }
        }
        if unbiased {
            sum / (len * (len - 1.0))
        } else {
            sum / (len * len)
        }
    };

    let mut cross = 0.0;
    for ea in a {
        for eb in b {
            cross += kernel_eval(k, &ea.values, &eb.values);
        }
    }
    let mmd_sq = self_term(a) + self_term(b) - 2.0 * cross / (m * n);
    Ok(mmd_sq.max(0.0).sqrt())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with eigenvectors as matching columns.
fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[[p, j]];
                    let aqj = a[[q, j]];
                    a[[p, j]] = c * apj - s * aqj;
                    a[[q, j]] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vecs[[row, col]] = v[[row, src]];
        }
    }
    (vals, vecs)
}

/// Principal-component scores on the top two axes, computed from the Gram
/// matrix of centered points (classic multidimensional scaling). Exact and
/// deterministic; used when too few points exist for the SNE path.
fn principal_axes_2d(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut coords = Array2::zeros((n, 2));
    if n == 1 {
        return coords;
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let centered = x - &mean.insert_axis(ndarray::Axis(0));
    let gram = centered.dot(&centered.t());
    let (vals, vecs) = jacobi_eigen(gram);
    for axis in 0..2usize.min(n) {
        let lambda = vals[axis].max(0.0);
        let scale = lambda.sqrt();
        for i in 0..n {
            coords[[i, axis]] = vecs[[i, axis]] * scale;
        }
    }
    coords
}

/// Seeded 2-D t-SNE: per-point bandwidths matched to [`TSNE_PERPLEXITY`] by
/// bisection, early exaggeration for 100 iterations, 500 total gradient
/// steps with the standard momentum switch. Pure in `(points, seed)`.
fn tsne_2d(x: &Array2<f64>, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..x.ncols() {
                let d = x[[i, c]] - x[[j, c]];
                s += d * d;
            }
            d2[[i, j]] = s;
            d2[[j, i]] = s;
        }
    }

    // conditional distributions with per-point precision found by bisection
    // on the Shannon entropy
    let target_entropy = TSNE_PERPLEXITY.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_lo = 0.0f64;
        let mut beta_hi = f64::INFINITY;
        for _ in 0..50 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[[i, j]]).exp();
                sum += w;
                weighted += w * d2[[i, j]];
            }
            let entropy = if sum > 0.0 {
                beta * weighted / sum + sum.ln()
            } else {
                0.0
            };
            if (entropy - target_entropy).abs() < 1e-5 {
                break;
            }
            if entropy > target_entropy {
                beta_lo = beta;
                beta = if beta_hi.is_finite() {
                    (beta + beta_hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[[i, j]] = (-beta * d2[[i, j]]).exp();
                sum += p[[i, j]];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[[i, j]] /= sum;
            }
        }
    }

    // symmetrized joint distribution
    let mut pj = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            pj[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::zeros((n, 2));
    y.mapv_inplace(|_| rng.gen_range(-1e-4..1e-4));
    let mut vel: Array2<f64> = Array2::zeros((n, 2));
    let eta = 200.0;

    for iter in 0..500 {
        let exaggeration = if iter < 100 { 4.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };

        let mut qnum: Array2<f64> = Array2::zeros((n, n));
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                qnum[[i, j]] = q;
                qnum[[j, i]] = q;
                qsum += 2.0 * q;
            }
        }

        for i in 0..n {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let q = (qnum[[i, j]] / qsum).max(1e-12);
                let coeff = 4.0 * (exaggeration * pj[[i, j]] - q) * qnum[[i, j]];
                gx += coeff * (y[[i, 0]] - y[[j, 0]]);
                gy += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
            vel[[i, 0]] = momentum * vel[[i, 0]] - eta * gx;
            vel[[i, 1]] = momentum * vel[[i, 1]] - eta * gy;
        }
        y += &vel;

        let mean = y.mean_axis(ndarray::Axis(0)).expect("n >= 1");
        for i in 0..n {
            y[[i, 0]] -= mean[0];
            y[[i, 1]] -= mean[1];
        }
    }
    y
}

/// Core analysis over already-encoded embedding sets: pairwise MMD matrix
/// plus a 2-D projection of the pooled points.
pub fn analyze_domains(
    sets: &[(String, Vec<SemanticEmbedding>)],
    kernel: Kernel,
    seed: u64,
) -> Result<DomainGapReport> {
    if sets.is_empty() {
        return Err(Error::invalid("no embedding sets given"));
    }
    for (tag, embs) in sets {
        if embs.is_empty() {
            return Err(Error::invalid(format!("embedding set `{tag}` is empty")));
        }
    }
    let views: Vec<&[SemanticEmbedding]> = sets.iter().map(|(_, e)| e.as_slice()).collect();
    let dim = embedding_dim(&views)?;

    let k = sets.len();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = mmd(&sets[i].1, &sets[j].1, kernel)?;
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }

    let total: usize = sets.iter().map(|(_, e)| e.len()).sum();
    let mut pooled = Array2::zeros((total, dim));
    let mut tags_per_point = Vec::with_capacity(total);
    let mut row = 0;
    for (tag, embs) in sets {
        for e in embs {
            for c in 0..dim {
                pooled[[row, c]] = e.values[c];
            }
            tags_per_point.push(tag.clone());
            row += 1;
        }
    }

    let (coords, reduction) = if total >= TSNE_MIN_POINTS {
        (tsne_2d(&pooled, seed), Reduction::Tsne)
    } else {
        (principal_axes_2d(&pooled), Reduction::PrincipalAxes)
    };
    let coord_rows: Vec<CoordRow> = (0..total)
        .map(|i| CoordRow {
            x: coords[[i, 0]],
            y: coords[[i, 1]],
            tag: tags_per_point[i].clone(),
        })
        .collect();

    let headline = if k >= 2 { matrix[0][1] } else { 0.0 };
    let resolved = if k >= 2 {
        resolve_kernel(&sets[0].1, &sets[1].1, kernel)
    } else {
        resolve_kernel(&sets[0].1, &sets[0].1, kernel)
    };
    Ok(DomainGapReport {
        mmd: headline,
        kernel: resolved,
        n_a: sets[0].1.len(),
        n_b: sets.get(1).map(|(_, e)| e.len()).unwrap_or(0),
        coords_2d: Some(coord_rows),
        tags: sets.iter().map(|(t, _)| t.clone()).collect(),
        mmd_matrix: matrix,
        reduction,
    })
}

/// Encodes every image under each tagged directory and runs
/// [`analyze_domains`] on the results.
pub fn export_embeddings_2d(
    datasets: &[(String, PathBuf)],
    spec: &EncoderSpec,
    seed: u64,
) -> Result<DomainGapReport> {
    if datasets.is_empty() {
        return Err(Error::invalid("no dataset directories given"));
    }
    let enc = Encoder::load(spec)?;
    let mut sets = Vec::with_capacity(datasets.len());
    for (tag, dir) in datasets {
        let files = list_image_files(dir)?;
        if files.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no images under {} for tag `{tag}`",
                dir.display()
            )));
        }
        let mut embs = Vec::with_capacity(files.len());
        for f in &files {
            let img = Image::load(f)?;
            embs.push(enc.encode(&img)?);
        }
        sets.push((tag.clone(), embs));
    }
    analyze_domains(&sets, Kernel::Linear, seed)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes the 2-D coordinates as `x,y,tag` rows.
pub fn write_coords_csv(path: &Path, coords: &[CoordRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in coords {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes the pairwise MMD matrix with tag row/column headers.
pub fn write_mmd_matrix_csv(path: &Path, tags: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["tag".to_string()];
    header.extend(tags.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (tag, row) in tags.iter().zip(matrix) {
        let mut rec = vec![tag.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(values: Vec<f64>) -> SemanticEmbedding {
        SemanticEmbedding {
            values: Array1::from_vec(values),
            encoder_id: "test".into(),
        }
    }

    fn unit(dim: usize, axis: usize) -> SemanticEmbedding {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        emb(v)
    }

    fn gaussian_cluster(n: usize, dim: usize, center: f64, std: f64, seed: u64) -> Vec<SemanticEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                // sum of uniforms approximates a normal well enough for a
                // cluster fixture
                emb((0..dim)
                    .map(|_| {
                        let s: f64 = (0..12).map(|_| rng.gen_range(0.0..1.0)).sum();
                        center + std * (s - 6.0)
                    })
                    .collect())
            })
            .collect()
    }

    /// Straightforward double-sum reference written independently of the
    /// production code path.
    fn mmd_oracle(a: &[SemanticEmbedding], b: &[SemanticEmbedding], kernel: Kernel) -> f64 {
        let k = |x: &SemanticEmbedding, y: &SemanticEmbedding| -> f64 {
            match kernel {
                Kernel::Linear => x
                    .values
                    .iter()
                    .zip(y.values.iter())
                    .map(|(p, q)| p * q)
                    .sum(),
                Kernel::Rbf { sigma } => {
                    let s = sigma.unwrap();
                    let d: f64 = x
                        .values
                        .iter()
                        .zip(y.values.iter())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    (-d / (2.0 * s * s)).exp()
                }
            }
        };
        let unbiased = a.len() >= 2 && b.len() >= 2;
        let term = |s: &[SemanticEmbedding]| {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for (i, x) in s.iter().enumerate() {
                for (j, y) in s.iter().enumerate() {
                    if unbiased && i == j {
                        continue;
                    }
                    sum += k(x, y);
                    cnt += 1.0;
                }
            }
            sum / cnt
        };
        let mut cross = 0.0;
        for x in a {
            for y in b {
                cross += k(x, y);
            }
        }
        let sq = term(a) + term(b) - 2.0 * cross / (a.len() * b.len()) as f64;
        sq.max(0.0).sqrt()
    }

    #[test]
    fn identical_multisets_have_zero_mmd() {
        let a = gaussian_cluster(6, 4, 0.0, 1.0, 1);
        for kernel in [Kernel::Linear, Kernel::Rbf { sigma: None }] {
            let v = mmd(&a, &a, kernel).unwrap();
            assert!(v <= 1e-9, "mmd(A, A) = {v}");
        }
    }

    #[test]
    fn singleton_unit_vectors_give_root_two() {
        let a = vec![unit(4, 0)];
        let b = vec![unit(4, 1)];
        let v = mmd(&a, &b, Kernel::Linear).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn separated_clusters_have_large_mmd_matching_the_oracle() {
        let a = gaussian_cluster(20, 6, 0.0, 0.5, 2);
        let b = gaussian_cluster(30, 6, 1.5, 0.5, 3);
        let lin = mmd(&a, &b, Kernel::Linear).unwrap();
        assert!(lin > 0.5, "linear mmd {lin}");
        assert!((lin - mmd_oracle(&a, &b, Kernel::Linear)).abs() < 1e-9);

        let resolved = resolve_kernel(&a, &b, Kernel::Rbf { sigma: None });
        let rbf = mmd(&a, &b, resolved).unwrap();
        assert!(rbf > 0.0);
        assert!((rbf - mmd_oracle(&a, &b, resolved)).abs() < 1e-9);
    }

    #[test]
    fn mmd_rejects_empty_sets_and_mixed_dims() {
        let a = vec![unit(4, 0)];
        assert!(mmd(&a, &[], Kernel::Linear).is_err());
        assert!(mmd(&[], &a, Kernel::Linear).is_err());
        let b = vec![unit(5, 0)];
        assert!(mmd(&a, &b, Kernel::Linear).is_err());
    }

    #[test]
    fn median_heuristic_resolution_is_deterministic() {
        let a = gaussian_cluster(8, 4, 0.0, 1.0, 4);
        let b = gaussian_cluster(8, 4, 2.0, 1.0, 5);
        let k1 = resolve_kernel(&a, &b, Kernel::Rbf { sigma: None });
        let k2 = resolve_kernel(&a, &b, Kernel::Rbf { sigma: None });
        assert_eq!(k1, k2);
        match k1 {
            Kernel::Rbf { sigma: Some(s) } => assert!(s > 0.0),
            other => panic!("unexpected kernel {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mmd_matches_the_oracle_and_stays_non_negative(
            na in 1usize..12,
            nb in 1usize..12,
            dim in 1usize..6,
            seed in 0u64..1000,
        ) {
            let a = gaussian_cluster(na, dim, 0.0, 1.0, seed);
            let b = gaussian_cluster(nb, dim, 0.5, 1.0, seed + 1);
            for kernel in [Kernel::Linear, Kernel::Rbf { sigma: Some(1.0) }] {
                let v = mmd(&a, &b, kernel).unwrap();
                prop_assert!(v >= 0.0);
                let o = mmd_oracle(&a, &b, kernel);
                prop_assert!((v - o).abs() < 1e-9, "impl {} vs oracle {}", v, o);
            }
        }
    }

    #[test]
    fn principal_axes_recover_a_line() {
        // points along a single direction in 6-D must project onto one axis
        // with their ordering preserved up to sign
        let dir: Vec<f64> = vec![0.5, -0.3, 0.2, 0.7, -0.1, 0.4];
        let sets = vec![(
            "line".to_string(),
            (0..7)
                .map(|i| emb(dir.iter().map(|d| d * i as f64).collect()))
                .collect::<Vec<_>>(),
        )];
        let report = analyze_domains(&sets, Kernel::Linear, 0).unwrap();
        assert_eq!(report.reduction, Reduction::PrincipalAxes);
        let coords = report.coords_2d.unwrap();
        assert_eq!(coords.len(), 7);
        let xs: Vec<f64> = coords.iter().map(|c| c.x).collect();
        let increasing = xs.windows(2).all(|w| w[1] > w[0]);
        let decreasing = xs.windows(2).all(|w| w[1] < w[0]);
        assert!(
            increasing || decreasing,
            "line ordering lost in projection: {xs:?}"
        );
        // the second axis carries no variance for collinear points; the
        // square root of the residual eigenvalue leaves only solver noise
        let x_span = xs.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        for c in &coords {
            assert!(c.y.abs() < 1e-6 * x_span, "y = {} vs span {}", c.y, x_span);
        }
    }

    #[test]
    fn duplicate_tags_show_no_gap() {
        let embs = gaussian_cluster(6, 4, 0.0, 1.0, 8);
        let sets = vec![
            ("left".to_string(), embs.clone()),
            ("right".to_string(), embs),
        ];
        let report = analyze_domains(&sets, Kernel::Linear, 0).unwrap();
        assert!(report.mmd < 1e-6);
        assert_eq!(report.mmd_matrix[0][1], report.mmd_matrix[1][0]);
        assert_eq!(report.mmd_matrix[0][0], 0.0);
        assert_eq!(report.n_a, 6);
        assert_eq!(report.n_b, 6);
        let coords = report.coords_2d.unwrap();
        assert_eq!(coords.len(), 12);
    }

    #[test]
    fn tsne_path_is_seeded_and_deterministic() {
        let sets = vec![
            ("a".to_string(), gaussian_cluster(50, 4, 0.0, 0.3, 10)),
            ("b".to_string(), gaussian_cluster(50, 4, 2.0, 0.3, 11)),
        ];
        let r1 = analyze_domains(&sets, Kernel::Linear, 42).unwrap();
        let r2 = analyze_domains(&sets, Kernel::Linear, 42).unwrap();
        assert_eq!(r1.reduction, Reduction::Tsne);
        assert_eq!(r1.coords_2d, r2.coords_2d);
        let r3 = analyze_domains(&sets, Kernel::Linear, 43).unwrap();
        assert_ne!(r1.coords_2d, r3.coords_2d, "different seeds should differ");

        // well-separated clusters should stay separated in the embedding
        let coords = r1.coords_2d.unwrap();
        let mean = |tag: &str, axis: usize| {
            let pts: Vec<f64> = coords
                .iter()
                .filter(|c| c.tag == tag)
                .map(|c| if axis == 0 { c.x } else { c.y })
                .collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        let dx = mean("a", 0) - mean("b", 0);
        let dy = mean("a", 1) - mean("b", 1);
        assert!(
            (dx * dx + dy * dy).sqrt() > 1.0,
            "cluster centers collapsed in the 2-d layout"
        );
    }

    #[test]
    fn export_runs_on_image_directories() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("set_a");
        let d2 = dir.path().join("set_b");
        std::fs::create_dir_all(&d1).unwrap();
        std::fs::create_dir_all(&d2).unwrap();
        for i in 0..3 {
            let mut img = Image::constant(16, 16, 3, 0.0);
            for r in 0..16 {
                for c in 0..16 {
                    img.pixels[[r, c, 0]] = ((r * 7 + c * 3 + i * 11) % 13) as f64 / 12.0;
                    img.pixels[[r, c, 1]] = ((r + c) % 5) as f64 / 4.0;
                    img.pixels[[r, c, 2]] = (r % 4) as f64 / 3.0;
                }
            }
            img.save_png(&d1.join(format!("a{i}.png"))).unwrap();
            let mut inv = img.clone();
            inv.pixels.mapv_inplace(|v| 1.0 - v);
            inv.save_png(&d2.join(format!("b{i}.png"))).unwrap();
        }
        let datasets = vec![
            ("natural".to_string(), d1),
            ("inverted".to_string(), d2),
        ];
        let spec = EncoderSpec::stub();
        let r1 = export_embeddings_2d(&datasets, &spec, 7).unwrap();
        let r2 = export_embeddings_2d(&datasets, &spec, 7).unwrap();
        assert_eq!(r1, r2, "export must be deterministic under a fixed seed");
        assert_eq!(r1.tags, vec!["natural", "inverted"]);
        assert_eq!(r1.coords_2d.as_ref().unwrap().len(), 6);
        assert!(r1.mmd > 0.0, "inverted images should show a gap");
    }

    #[test]
    fn csv_writers_produce_headers_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let coords_path = dir.path().join("coords.csv");
        let coords = vec![
            CoordRow { x: 1.0, y: 2.0, tag: "a".into() },
            CoordRow { x: -0.5, y: 0.25, tag: "b".into() },
        ];
        write_coords_csv(&coords_path, &coords).unwrap();
        let text = std::fs::read_to_string(&coords_path).unwrap();
        assert!(text.starts_with("x,y,tag"));
        assert!(text.contains("-0.5,0.25,b"));

        let matrix_path = dir.path().join("mmd.csv");
        let tags = vec!["a".to_string(), "b".to_string()];
        let matrix = vec![vec![0.0, 0.7], vec![0.7, 0.0]];
        write_mmd_matrix_csv(&matrix_path, &tags, &matrix).unwrap();
        let text = std::fs::read_to_string(&matrix_path).unwrap();
        assert!(text.starts_with("tag,a,b"));
        assert!(text.contains("a,0,0.7"));
    }
}

//! Silhouette-based choice of the cluster-count floor and the stopping rule
//! built on it.
//!
//! On the first iteration a random subset of pixels is clustered with k-means
//! for every candidate `k`; the best-scoring `k` becomes `opt_nc`, the
//! smallest number of clusters the optimizer is allowed to settle on.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DistanceMetric, SilhouetteConfig, SilhouetteFeatures};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, ResponseMap, SeedStreams, Stream};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-8;

/// Pairwise distances between the rows of `points`.
pub fn distance_matrix(points: ArrayView2<f64>, metric: DistanceMetric) -> Array2<f64> {
    let n = points.nrows();
    let mut d = Array2::zeros((n, n));
    match metric {
        DistanceMetric::Euclidean => {
            let gram = points.dot(&points.t());
            for i in 0..n {
                for j in (i + 1)..n {
                    let sq = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(0.0);
                    d[[i, j]] = sq.sqrt();
                    d[[j, i]] = d[[i, j]];
                }
            }
        }
        DistanceMetric::Manhattan => {
            for i in 0..n {
                for j in (i + 1)..n {
                    let v: f64 = points
                        .row(i)
                        .iter()
                        .zip(points.row(j))
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    d[[i, j]] = v;
                    d[[j, i]] = v;
                }
            }
        }
    }
    d
}

/// Mean silhouette over all points given precomputed pairwise distances.
/// Points in singleton clusters contribute 0.
pub fn silhouette_from_distances(dist: ArrayView2<f64>, assignment: &[usize]) -> Result<f64> {
    let n = assignment.len();
    if dist.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "{n} assignments for a {:?} distance matrix",
            dist.dim()
        )));
    }
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::SingleCluster);
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[assignment[j]] += dist[[i, j]];
        }
        let own = assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Mean silhouette of `points` (one row per point) under `assignment`,
/// with Euclidean distances.
pub fn silhouette_score(points: ArrayView2<f64>, assignment: &[usize]) -> Result<f64> {
    if points.nrows() != assignment.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} assignments",
            points.nrows(),
            assignment.len()
        )));
    }
    let d = distance_matrix(points, DistanceMetric::Euclidean);
    silhouette_from_distances(d.view(), assignment)
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn sq_dists_to_centroids(points: ArrayView2<f64>, norms: &Array1<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    let cnorm: Array1<f64> = centroids.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = points.dot(&centroids.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (norms[i] + cnorm[j] - 2.0 * *v).max(0.0);
    }
    d
}

fn kmeans_pp_init(points: ArrayView2<f64>, norms: &Array1<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut closest = sq_dists_to_centroids(points, norms, &centroids.slice(ndarray::s![0..1, ..]).to_owned())
        .column(0)
        .to_owned();
    for c in 1..k {
        let total: f64 = closest.sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        let d = sq_dists_to_centroids(points, norms, &centroids.slice(ndarray::s![c..c + 1, ..]).to_owned());
        for (cl, &dn) in closest.iter_mut().zip(d.column(0)) {
            *cl = cl.min(dn);
        }
    }
    centroids
}

fn lloyd(points: ArrayView2<f64>, norms: &Array1<f64>, mut centroids: Array2<f64>) -> KMeansFit {
    let n = points.nrows();
    let k = centroids.nrows();
    let mut assignment = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITERS {
        let d = sq_dists_to_centroids(points, norms, &centroids);
        let mut new_inertia = 0.0;
        for (i, row) in d.axis_iter(Axis(0)).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            assignment[i] = best;
            new_inertia += row[best];
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            counts[a] += 1;
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        let converged = (inertia - new_inertia).abs() <= KMEANS_TOL * inertia.max(1.0);
        inertia = new_inertia;
        if converged {
            break;
        }
    }
    KMeansFit {
        assignment,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding; keeps the lowest-inertia of `restarts` runs.
pub fn kmeans(points: ArrayView2<f64>, k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Result<KMeansFit> {
    if k < 1 || k > points.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot form {k} clusters from {} points",
            points.nrows()
        )));
    }
    let norms: Array1<f64> = points.map_axis(Axis(1), |r| r.dot(&r));
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp_init(points, &norms, k, rng);
        let fit = lloyd(points, &norms, init);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteResult {
    pub candidate_ks: Vec<usize>,
    /// `None` where k-means could not produce `k` non-empty clusters.
    pub scores: Vec<Option<f64>>,
    pub opt_nc: usize,
}

/// Per-pixel feature rows for the gate.
fn gate_features(image: &ImageTensor, resp: &ResponseMap, source: SilhouetteFeatures) -> Result<Array2<f64>> {
    if (image.height(), image.width()) != (resp.height(), resp.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, responses are {}x{}",
            image.height(),
            image.width(),
            resp.height(),
            resp.width()
        )));
    }
    Ok(match source {
        SilhouetteFeatures::Responses => resp.pixel_rows(),
        SilhouetteFeatures::Color => {
            let (h, w, _) = image.pixels().dim();
            Array2::from_shape_fn((h * w, 3), |(i, c)| image.pixels()[[i / w, i % w, c]] as f64)
        }
    })
}

/// Scores every candidate cluster count on a seeded pixel sample and returns
/// the best one (ties go to the smaller `k`).
pub fn select_opt_nc(
    image: &ImageTensor,
    first_resp: &ResponseMap,
    candidate_ks: &[usize],
    cfg: &SilhouetteConfig,
    seeds: SeedStreams,
) -> Result<SilhouetteResult> {
    if candidate_ks.is_empty() || candidate_ks.iter().any(|&k| k < 2) {
        return Err(Error::Config("silhouette candidates must all be >= 2".into()));
    }
    let features = gate_features(image, first_resp, cfg.features)?;
    let n = features.nrows();
    let m = cfg.sample_size.min(n);
    let mut sampler = seeds.rng(Stream::PixelSampling);
    let mut idx = sample(&mut sampler, n, m).into_vec();
    idx.sort_unstable();
    let points = features.select(Axis(0), &idx);
    let dist = distance_matrix(points.view(), cfg.metric);

    let scores: Vec<Option<f64>> = candidate_ks
        .par_iter()
        .map(|&k| {
            if k > m {
                return None;
            }
            // one stream per k keeps results independent of evaluation order
            let mut rng = seeds.rng(Stream::KMeans);
            rng.set_word_pos(k as u128 * (1u128 << 40));
            let fit = kmeans(points.view(), k, cfg.restarts, &mut rng).ok()?;
            let mut used = vec![false; k];
            fit.assignment.iter().for_each(|&a| used[a] = true);
            if used.iter().any(|u| !u) {
                return None;
            }
            silhouette_from_distances(dist.view(), &fit.assignment).ok()
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (&k, s) in candidate_ks.iter().zip(&scores) {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    let (opt_nc, _) = best.ok_or(Error::SingleCluster)?;
    Ok(SilhouetteResult {
        candidate_ks: candidate_ks.to_vec(),
        scores,
        opt_nc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Continue,
    StopThreshold,
    StopMaxIters,
}

/// Threshold stop when `q_prime <= opt_nc`, else iteration-cap stop once
/// `iter >= max_iters`. The threshold check wins when both apply.
pub fn should_stop(q_prime: usize, opt_nc: usize, iter: usize, max_iters: usize) -> StopDecision {
    if q_prime <= opt_nc {
        StopDecision::StopThreshold
    } else if iter >= max_iters {
        StopDecision::StopMaxIters
    } else {
        StopDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::seed_all;
    use ndarray::{array, Array3};
    use rand::SeedableRng;

    /// Brute-force silhouette straight from the definition.
    fn oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let dist = |a: &Vec<f64>, b: &Vec<f64>| {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let k = *labels.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for i in 0..points.len() {
            let mut per = vec![(0.0, 0usize); k];
            for j in 0..points.len() {
                if i != j {
                    per[labels[j]].0 += dist(&points[i], &points[j]);
                    per[labels[j]].1 += 1;
                }
            }
            let (sa, na) = per[labels[i]];
            if na == 0 {
                continue;
            }
            let a = sa / na as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i] && per[c].1 > 0)
                .map(|c| per[c].0 / per[c].1 as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / points.len() as f64
    }

    #[test]
    fn two_separated_pairs() {
        let pts = array![[0.0], [1.0], [10.0], [11.0]];
        let labels = [0, 0, 1, 1];
        let s = silhouette_score(pts.view(), &labels).unwrap();
        let expected = oracle(
            &pts.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            &labels,
        );
        assert!((s - expected).abs() < 1e-12);
        // points 0 and 11 score 19/21, points 1 and 10 score 17/19
        assert!((s - (19.0 / 21.0 + 17.0 / 19.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(4..30);
            let k = rng.random_range(2..4);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let arr = Array2::from_shape_fn((n, 3), |(i, j)| pts[i][j]);
            let s = silhouette_score(arr.view(), &labels).unwrap();
            assert!((s - oracle(&pts, &labels)).abs() < 1e-10);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn singleton_clusters_count_zero() {
        let pts = array![[0.0], [5.0], [5.5]];
        let s = silhouette_score(pts.view(), &[0, 1, 1]).unwrap();
        let expected = oracle(&[vec![0.0], vec![5.0], vec![5.5]], &[0, 1, 1]);
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn overlapping_clusters_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Array2::from_shape_fn((400, 2), |_| rng.random::<f64>());
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        assert!(silhouette_score(pts.view(), &labels).unwrap().abs() < 0.05);
    }

    #[test]
    fn random_labels_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = Array2::from_shape_fn((500, 2), |_| rng.random::<f64>());
        let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        assert!(silhouette_score(pts.view(), &labels).unwrap().abs() < 0.2);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let pts = array![[0.0], [1.0]];
        assert!(matches!(silhouette_score(pts.view(), &[0, 0]), Err(Error::SingleCluster)));
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_fn((90, 2), |(i, _)| (i / 30) as f64 * 10.0 + rng.random::<f64>());
        let fit = kmeans(pts.view(), 3, 5, &mut rng).unwrap();
        for blob in 0..3 {
            let first = fit.assignment[blob * 30];
            assert!(fit.assignment[blob * 30..(blob + 1) * 30].iter().all(|&a| a == first));
        }
    }

    fn blocks_image(blocks: usize, noise: f32, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9], [0.9, 0.9, 0.2]];
        let px = Array3::from_shape_fn((24, 24, 3), |(_, j, c)| {
            let b = j * blocks / 24;
            (colors[b][c] + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)
        });
        ImageTensor::new(px, "blocks").unwrap()
    }

    fn color_cfg() -> SilhouetteConfig {
        SilhouetteConfig {
            features: SilhouetteFeatures::Color,
            restarts: 3,
            ..Default::default()
        }
    }

    #[test]
    fn selects_block_count_from_color() {
        for (blocks, ks) in [(3usize, (2..=8).collect::<Vec<_>>()), (2, (2..=8).collect())] {
            let img = blocks_image(blocks, 0.05, 1);
            let resp = ResponseMap::normalized(Array3::zeros((24, 24, 1)));
            let r = select_opt_nc(&img, &resp, &ks, &color_cfg(), seed_all(0)).unwrap();
            assert_eq!(r.opt_nc, blocks);
            // exhaustive check of the argmax
            let best = r
                .scores
                .iter()
                .zip(&r.candidate_ks)
                .filter_map(|(s, &k)| s.map(|s| (k, s)))
                .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
            assert_eq!(best.0, blocks);
        }
    }

    #[test]
    fn single_candidate() {
        let img = blocks_image(3, 0.05, 2);
        let resp = ResponseMap::normalized(Array3::zeros((24, 24, 1)));
        let r = select_opt_nc(&img, &resp, &[2], &color_cfg(), seed_all(0)).unwrap();
        assert_eq!(r.opt_nc, 2);
    }

    #[test]
    fn selection_is_seeded() {
        let img = blocks_image(4, 0.3, 3);
        let resp = ResponseMap::normalized(Array3::zeros((24, 24, 1)));
        let ks: Vec<usize> = (2..=6).collect();
        let a = select_opt_nc(&img, &resp, &ks, &color_cfg(), seed_all(4)).unwrap();
        let b = select_opt_nc(&img, &resp, &ks, &color_cfg(), seed_all(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stop_rule() {
        assert_eq!(should_stop(3, 3, 10, 64), StopDecision::StopThreshold);
        assert_eq!(should_stop(40, 3, 64, 64), StopDecision::StopMaxIters);
        assert_eq!(should_stop(40, 3, 10, 64), StopDecision::Continue);
        assert_eq!(should_stop(2, 3, 64, 64), StopDecision::StopThreshold);
    }
}

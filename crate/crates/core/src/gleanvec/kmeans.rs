//! Spherical k-means with k-means++ seeding.

use std::collections::HashSet;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{sample_rows, VectorSet};
use crate::error::{Error, Result};

/// Clustering runs on a uniform subsample of at most this many points.
pub const DEFAULT_SAMPLE_LIMIT: usize = 100_000;
pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub sample_limit: usize,
}

impl KMeansParams {
    pub fn new(clusters: usize, seed: u64) -> Self {
        KMeansParams {
            clusters,
            max_iters: DEFAULT_MAX_ITERS,
            seed,
            sample_limit: DEFAULT_SAMPLE_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `C` unit-norm centers, one `Vec` per center.
    pub centers: Vec<Vec<f64>>,
    /// `Σ_i max_c ⟨x̃_i, μ_c⟩` on the sample, for the seeded centers and after
    /// every update.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of empty clusters that had to be reseeded over the run.
    pub reseeds: usize,
}

fn dot64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * f64::from(*y)).sum()
}

/// Best center by inner product, lowest index on ties.
pub(crate) fn nearest(centers: &[Vec<f64>], x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in centers.iter().enumerate() {
        let s = dot64(mu, x);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|v| f64::from(*v)).collect()
}

fn distinct_rows(set: &VectorSet, at_least: usize) -> usize {
    let mut seen = HashSet::new();
    for row in set.rows() {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u32>>());
        if seen.len() >= at_least {
            break;
        }
    }
    seen.len()
}

/// k-means++ on the sphere: squared chord distance `2 − 2⟨x, μ⟩`.
fn seed_centers<R: Rng>(sample: &VectorSet, clusters: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = sample.len();
    let mut centers = vec![to_f64(sample.row(rng.random_range(0..n)))];
    let mut best_sim: Vec<f64> = sample.rows().map(|r| dot64(&centers[0], r)).collect();
    while centers.len() < clusters {
        let weights: Vec<f64> = best_sim.iter().map(|s| (2.0 - 2.0 * s).max(0.0)).collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // Every remaining point coincides with a center; take the farthest.
            Err(_) => (0..n)
                .min_by(|&a, &b| best_sim[a].total_cmp(&best_sim[b]).then(a.cmp(&b)))
                .unwrap_or(0),
        };
        let mu = to_f64(sample.row(pick));
        for (s, row) in best_sim.iter_mut().zip(sample.rows()) {
            *s = s.max(dot64(&mu, row));
        }
        centers.push(mu);
    }
    centers
}

/// Spherical k-means on unit-norm data.
///
/// Alternates tag assignment `argmax_c ⟨x̃, μ_c⟩` with the renormalized-mean
/// center update until no assignment changes or `max_iters` updates have run.
/// A cluster that comes up empty is reseeded with the point least similar to
/// its current center (taken from a cluster that can spare it), which can only
/// raise the objective.
pub fn spherical_kmeans(x_norm: &VectorSet, params: &KMeansParams) -> Result<KMeansResult> {
    if !x_norm.is_normalized() {
        return Err(Error::param("spherical k-means expects normalized rows"));
    }
    if params.clusters == 0 {
        return Err(Error::param("need at least one cluster"));
    }
    if x_norm.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sample = sample_rows(x_norm, params.sample_limit.max(1), params.seed);
    let clusters = params.clusters;
    if clusters > sample.len() || distinct_rows(&sample, clusters) < clusters {
        return Err(Error::param(format!(
            "{clusters} clusters requested but the sample has fewer distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x005e_edc1_u64);
    let mut centers = seed_centers(&sample, clusters, &mut rng);

    let n = sample.len();
    let mut assignment = vec![usize::MAX; n];
    let mut similarity = vec![0.0f64; n];
    let mut objective = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;

    loop {
        // E-step
        let mut changed = false;
        for (i, row) in sample.rows().enumerate() {
            let (c, s) = nearest(&centers, row);
            if assignment[i] != c {
                changed = true;
                assignment[i] = c;
            }
            similarity[i] = s;
        }
        if objective.is_empty() {
            objective.push(similarity.iter().sum());
        }
        let reseeded = reseed_empty(&mut centers, &mut assignment, &mut similarity, &sample);
        reseeds += reseeded;
        if !changed && reseeded == 0 {
            converged = true;
            break;
        }
        if iterations == params.max_iters {
            break;
        }

        // M-step
        let dim = sample.dim();
        let mut sums = vec![vec![0.0f64; dim]; clusters];
        for (row, &c) in sample.rows().zip(&assignment) {
            for (s, v) in sums[c].iter_mut().zip(row) {
                *s += f64::from(*v);
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            // A cancelling sum keeps the previous center.
            if let Some(mu) = normalized(sum) {
                centers[c] = mu;
            }
        }
        iterations += 1;
        objective.push(sample.rows().map(|r| nearest(&centers, r).1).sum());
    }

    Ok(KMeansResult {
        centers,
        objective,
        iterations,
        converged,
        reseeds,
    })
}

/// Moves a point into every empty cluster. Returns how many were reseeded.
fn reseed_empty(
    centers: &mut [Vec<f64>],
    assignment: &mut [usize],
    similarity: &mut [f64],
    sample: &VectorSet,
) -> usize {
    let mut sizes = vec![0usize; centers.len()];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    let empty: Vec<usize> = (0..centers.len()).filter(|&c| sizes[c] == 0).collect();
    if empty.is_empty() {
        return 0;
    }
    let mut order: Vec<usize> = (0..assignment.len()).collect();
    order.sort_by(|&a, &b| similarity[a].total_cmp(&similarity[b]).then(a.cmp(&b)));
    let mut donors = order.into_iter();
    for &c in &empty {
        let Some(i) = donors.by_ref().find(|&i| sizes[assignment[i]] > 1) else {
            break;
        };
        sizes[assignment[i]] -= 1;
        assignment[i] = c;
        sizes[c] = 1;
        centers[c] = normalized(to_f64(sample.row(i))).expect("sample rows are nonzero");
        similarity[i] = 1.0;
    }
    empty.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{normalize_rows, Similarity};

    fn unit_set(rows: &[Vec<f32>]) -> VectorSet {
        normalize_rows(&VectorSet::from_rows(rows, Similarity::InnerProduct).unwrap()).unwrap()
    }

    #[test]
    fn single_cluster_is_mean_direction() {
        let x = unit_set(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let res = spherical_kmeans(&x, &KMeansParams::new(1, 3)).unwrap();
        let mut mean = [0.0f64; 2];
        for r in x.rows() {
            mean[0] += f64::from(r[0]);
            mean[1] += f64::from(r[1]);
        }
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((res.centers[0][0] - mean[0] / norm).abs() < 1e-9);
        assert!((res.centers[0][1] - mean[1] / norm).abs() < 1e-9);
    }

    #[test]
    fn antipodal_clouds_split() {
        // Two 25-point arcs around angles 0.3 and 0.3 + π.
        let mut rows = Vec::new();
        for i in 0..25 {
            let t = 0.3 + (i as f64 - 12.0) * 0.01;
            rows.push(vec![t.cos() as f32, t.sin() as f32]);
            rows.push(vec![-t.cos() as f32, -t.sin() as f32]);
        }
        let x = unit_set(&rows);
        let res = spherical_kmeans(&x, &KMeansParams::new(2, 11)).unwrap();
        let mut angles: Vec<f64> = res.centers.iter().map(|c| c[1].atan2(c[0])).collect();
        angles.sort_by(f64::total_cmp);
        let expect = [0.3 - std::f64::consts::PI, 0.3];
        for (a, e) in angles.iter().zip(expect) {
            assert!((a - e).abs() < 0.05, "{a} vs {e}");
        }
        assert!(res.objective.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn too_many_clusters() {
        let x = unit_set(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert!(spherical_kmeans(&x, &KMeansParams::new(3, 0)).is_err());
        assert!(spherical_kmeans(&x, &KMeansParams::new(2, 0)).is_ok());
    }

    #[test]
    fn requires_normalized_input() {
        let x = VectorSet::from_rows(&[vec![1.0f32, 0.0]], Similarity::InnerProduct).unwrap();
        assert!(spherical_kmeans(&x, &KMeansParams::new(1, 0)).is_err());
    }
}

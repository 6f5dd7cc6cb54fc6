//! Lloyd's k-means with k-means++ seeding, used to initialize NetVLAD.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use crate::error::{Error, Result};
use crate::netvlad::VladParams;
use crate::pooling::ColumnFeatureSet;
use crate::rng;

pub const DEFAULT_MAX_ITERS: usize = 100;
/// Lloyd's iterations stop once the relative SSE change falls below this.
pub const SSE_TOLERANCE: f64 = 1e-6;
/// Target mean ratio between the largest and second-largest soft assignment.
pub const TARGET_ASSIGNMENT_RATIO: f64 = 100.0;
/// Used when no finite sharpness reaches the target ratio.
pub const FALLBACK_ALPHA: f64 = 25.0;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub clusters: usize,
    pub dim: usize,
    /// `clusters × dim`, row-major.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    centers
        .chunks_exact(dim)
        .enumerate()
        .map(|(k, c)| (k, sq_dist(point, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

fn plus_plus_seed(samples: &ColumnFeatureSet, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = samples.count();
    let dim = samples.dim();
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(samples.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = samples
        .rows()
        .map(|r| sq_dist(r, &centers[..dim]))
        .collect();
    while centers.len() < k * dim {
        let pick = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            // Every remaining sample coincides with a center.
            Err(_) => rng.random_range(0..n),
        };
        let start = centers.len();
        centers.extend_from_slice(samples.row(pick));
        for (d, row) in closest.iter_mut().zip(samples.rows()) {
            *d = d.min(sq_dist(row, &centers[start..]));
        }
    }
    centers
}

/// Clusters `samples` into `k` groups.
pub fn kmeans(samples: &ColumnFeatureSet, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 || max_iters == 0 {
        return Err(Error::Config(
            "k-means needs k >= 1 and max_iters >= 1".into(),
        ));
    }
    if samples.count() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            available: samples.count(),
        });
    }
    let mut rng = rng::stream(seed, rng::KMEANS, 0);
    let n = samples.count();
    let dim = samples.dim();
    let mut centers = plus_plus_seed(samples, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut prev_sse = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        for (i, row) in samples.rows().enumerate() {
            (assignments[i], dists[i]) = nearest(row, &centers, dim);
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        // Reseed empty clusters at the sample farthest from its center.
        for cluster in 0..k {
            if sizes[cluster] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("n >= k leaves a cluster with two members");
            sizes[assignments[far]] -= 1;
            sizes[cluster] = 1;
            assignments[far] = cluster;
            dists[far] = 0.0;
            centers[cluster * dim..(cluster + 1) * dim].copy_from_slice(samples.row(far));
        }

        let mut sums = vec![0.0; k * dim];
        for (row, &a) in samples.rows().zip(&assignments) {
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        for cluster in 0..k {
            let size = sizes[cluster] as f64;
            for j in 0..dim {
                centers[cluster * dim + j] = sums[cluster * dim + j] / size;
            }
        }

        let sse: f64 = samples
            .rows()
            .zip(&assignments)
            .map(|(row, &a)| sq_dist(row, &centers[a * dim..(a + 1) * dim]))
            .sum();
        let converged = prev_sse.is_finite() && (prev_sse - sse).abs() <= SSE_TOLERANCE * prev_sse;
        prev_sse = sse;
        if converged || sse == 0.0 {
            break;
        }
    }

    Ok(KMeans {
        clusters: k,
        dim,
        centers,
        assignments,
        sse: prev_sse,
        iterations,
    })
}

fn mean_ratio(gaps: &[f64], alpha: f64) -> f64 {
    gaps.iter()
        .map(|g| (alpha * g).min(700.0).exp())
        .sum::<f64>()
        / gaps.len() as f64
}

/// Softmax sharpness for which the mean ratio of the largest to the
/// second-largest assignment over `samples` equals
/// [`TARGET_ASSIGNMENT_RATIO`]. With `w = 2αc` and `b = -α‖c‖²` that ratio
/// for one sample is `exp(α (d₂ - d₁))`, where `d₁ ≤ d₂` are its two smallest
/// squared distances to the centers.
pub fn calibrate_alpha(samples: &ColumnFeatureSet, centers: &[f64]) -> f64 {
    let dim = samples.dim();
    if centers.len() < 2 * dim {
        return FALLBACK_ALPHA;
    }
    let gaps: Vec<f64> = samples
        .rows()
        .map(|row| {
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for c in centers.chunks_exact(dim) {
                let d = sq_dist(row, c);
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                } else if d < d2 {
                    d2 = d;
                }
            }
            d2 - d1
        })
        .collect();
    if !gaps.iter().any(|&g| g > 0.0) {
        return FALLBACK_ALPHA;
    }

    let mut hi = 1.0;
    while mean_ratio(&gaps, hi) < TARGET_ASSIGNMENT_RATIO {
        hi *= 2.0;
        if hi > 1e18 {
            return FALLBACK_ALPHA;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ratio(&gaps, mid) < TARGET_ASSIGNMENT_RATIO {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);
    if alpha.is_finite() && alpha > 0.0 {
        alpha
    } else {
        FALLBACK_ALPHA
    }
}

/// Up to `sample_size` columns drawn uniformly without replacement from all
/// columns of `sets`, in their original order. Every column is kept when
/// there are fewer.
pub fn sample_columns(
    sets: &[ColumnFeatureSet],
    sample_size: usize,
    seed: u64,
) -> Result<ColumnFeatureSet> {
    let Some(dim) = sets.first().map(ColumnFeatureSet::dim) else {
        return Err(Error::InsufficientSamples {
            needed: sample_size.max(1),
            available: 0,
        });
    };
    if sets.iter().any(|s| s.dim() != dim) {
        return Err(Error::dim("column sets differ in dimension"));
    }
    let rows: Vec<&[f64]> = sets.iter().flat_map(ColumnFeatureSet::rows).collect();
    let picked: Vec<&[f64]> = if rows.len() <= sample_size {
        rows
    } else {
        let mut rng = rng::stream(seed, rng::KMEANS_SAMPLE, 0);
        let mut idx = rand::seq::index::sample(&mut rng, rows.len(), sample_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| rows[i]).collect()
    };
    ColumnFeatureSet::from_rows(&picked)
}

/// NetVLAD parameters from k-means centers: `w_k = 2α c_k`,
/// `b_k = -α ‖c_k‖²`, with α from [`calibrate_alpha`].
pub fn kmeans_init(
    samples: &ColumnFeatureSet,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<VladParams> {
    if k < 2 {
        return Err(Error::Config("NetVLAD needs at least 2 clusters".into()));
    }
    let result = kmeans(samples, k, seed, max_iters)?;
    let alpha = calibrate_alpha(samples, &result.centers);
    Ok(VladParams::from_centers(
        k,
        samples.dim(),
        result.centers,
        alpha,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sorted_centers(km: &KMeans) -> Vec<Vec<f64>> {
        let mut c: Vec<Vec<f64>> = (0..km.clusters).map(|k| km.center(k).to_vec()).collect();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c
    }

    #[test]
    fn column_sampling() {
        let a = ColumnFeatureSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = ColumnFeatureSet::from_rows(&[vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let sets = [a, b];
        assert_eq!(
            sample_columns(&sets, 10, 0).unwrap().values(),
            &[0.0, 1.0, 2.0, 3.0, 4.0]
        );
        let s = sample_columns(&sets, 3, 7).unwrap();
        assert_eq!(s.count(), 3);
        assert!(s.values().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.values(), sample_columns(&sets, 3, 7).unwrap().values());
        assert!(matches!(
            sample_columns(&[], 3, 0),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn two_point_clusters() {
        let mut rows = vec![vec![0.0, 0.0]; 10];
        rows.extend(vec![vec![10.0, 10.0]; 10]);
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        for seed in 0..5 {
            let km = kmeans(&samples, 2, seed, 100).unwrap();
            assert_eq!(sorted_centers(&km), vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
            assert_eq!(km.sse, 0.0);
        }
    }

    #[test]
    fn k_equals_count_recovers_samples() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.3])
            .collect();
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        let km = kmeans(&samples, 6, 11, 100).unwrap();
        assert_eq!(sorted_centers(&km), rows);
    }

    #[test]
    fn gaussian_clusters_sse_near_generating_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = [[0.0, 0.0, 0.0], [6.0, 0.0, 1.0], [0.0, 7.0, -3.0]];
        let mut rows = Vec::new();
        for center in &truth {
            for _ in 0..200 {
                rows.push(
                    center
                        .iter()
                        .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<_>>(),
                );
            }
        }
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        // Oracle: SSE of each sample against its generating center.
        let oracle_sse: f64 = rows
            .iter()
            .enumerate()
            .map(|(i, r)| sq_dist(r, &truth[i / 200]))
            .sum();
        let km = kmeans(&samples, 3, 1, 100).unwrap();
        assert!(km.sse <= oracle_sse * 1.05, "{} vs {}", km.sse, oracle_sse);
    }

    #[test]
    fn insufficient_samples() {
        let samples = ColumnFeatureSet::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(matches!(
            kmeans_init(&samples, 3, 0, 10),
            Err(Error::InsufficientSamples {
                needed: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Duplicates make k-means++ fall back to uniform picks, which can
        // choose the same point twice and leave a cluster empty.
        let rows = vec![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [5.0, 5.0]];
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        for seed in 0..20 {
            let km = kmeans(&samples, 3, seed, 10).unwrap();
            for k in 0..3 {
                assert!(
                    km.assignments.contains(&k),
                    "seed {seed}: cluster {k} empty"
                );
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<[f64; 4]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        let a = kmeans_init(&samples, 5, 42, 50).unwrap();
        let b = kmeans_init(&samples, 5, 42, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alpha_hits_target_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 3]> = (0..300)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let samples = ColumnFeatureSet::from_rows(&rows).unwrap();
        let km = kmeans(&samples, 4, 0, 100).unwrap();
        let alpha = calibrate_alpha(&samples, &km.centers);
        assert!(alpha > 0.0 && alpha != FALLBACK_ALPHA);

        // Measure the ratio from actual soft assignments.
        let params = VladParams::from_centers(4, 3, km.centers.clone(), alpha);
        let mut total = 0.0;
        for row in samples.rows() {
            let mut a = params.soft_assign(row);
            a.sort_by(|x, y| y.partial_cmp(x).unwrap());
            total += a[0] / a[1];
        }
        let mean = total / samples.count() as f64;
        assert!(
            (mean / TARGET_ASSIGNMENT_RATIO - 1.0).abs() < 1e-6,
            "{mean}"
        );
    }

    #[test]
    fn alpha_falls_back_on_degenerate_samples() {
        let samples = ColumnFeatureSet::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        let centers = vec![1.0, 1.0, 1.0, 1.0];
        assert_eq!(calibrate_alpha(&samples, &centers), FALLBACK_ALPHA);
    }
}

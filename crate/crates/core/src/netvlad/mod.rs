//! NetVLAD aggregation of column features.
//!
//! For columns `x_i` and clusters `k` with center `c_k`, assignment weights
//! `w_k` and bias `b_k`:
//!
//! ```text
//! a_k(x_i) = softmax_k(w_k · x_i + b_k)
//! V(k, j)  = Σ_i a_k(x_i) (x_i(j) - c_k(j))
//! ```
//!
//! Each row `V(k, ·)` is L2-normalized (intra-normalization), the rows are
//! flattened cluster-major, optionally passed through `sign(v)·√|v|`, and the
//! result is L2-normalized.

pub mod kmeans;

use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::pooling::{multiscale_columns, ColumnFeatureSet, PoolingMode};
use crate::retrieval::combine_multires;

pub use kmeans::{calibrate_alpha, kmeans, kmeans_init, sample_columns, KMeans};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Trainable NetVLAD parameters. The same shape is used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    clusters: usize,
    dim: usize,
    /// `K × D` cluster centers.
    pub centers: Vec<f64>,
    /// `K × D` assignment weights.
    pub weights: Vec<f64>,
    /// `K` assignment biases.
    pub biases: Vec<f64>,
}

impl VladParams {
    pub fn new(
        clusters: usize,
        dim: usize,
        centers: Vec<f64>,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if clusters < 2 || dim == 0 {
            return Err(Error::dim(format!(
                "NetVLAD needs K >= 2 and D >= 1, got K={clusters}, D={dim}"
            )));
        }
        if centers.len() != clusters * dim
            || weights.len() != clusters * dim
            || biases.len() != clusters
        {
            return Err(Error::dim(format!(
                "parameter sizes ({}, {}, {}) do not match K={clusters}, D={dim}",
                centers.len(),
                weights.len(),
                biases.len()
            )));
        }
        let params = Self {
            clusters,
            dim,
            centers,
            weights,
            biases,
        };
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(params)
    }

    pub fn zeros(clusters: usize, dim: usize) -> Self {
        Self {
            clusters,
            dim,
            centers: vec![0.0; clusters * dim],
            weights: vec![0.0; clusters * dim],
            biases: vec![0.0; clusters],
        }
    }

    /// Parameters whose soft assignment is `softmax(-α ‖x - c_k‖²)`.
    pub fn from_centers(clusters: usize, dim: usize, centers: Vec<f64>, alpha: f64) -> Self {
        let weights = centers.iter().map(|c| 2.0 * alpha * c).collect();
        let biases = centers
            .chunks_exact(dim)
            .map(|c| -alpha * c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Self {
            clusters,
            dim,
            centers,
            weights,
            biases,
        }
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters * self.dim
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &VladParams) -> bool {
        self.clusters == other.clusters && self.dim == other.dim
    }

    /// All values: centers, then weights, then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.centers.iter().chain(&self.weights).chain(&self.biases)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.centers
            .iter_mut()
            .chain(self.weights.iter_mut())
            .chain(self.biases.iter_mut())
    }

    pub fn len(&self) -> usize {
        2 * self.clusters * self.dim + self.clusters
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &VladParams, scale: f64) {
        assert!(self.same_shape(other), "parameter shapes differ");
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    /// Soft assignment of one column over the clusters.
    pub fn soft_assign(&self, x: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = (0..self.clusters)
            .map(|k| dot(self.weight(k), x) + self.biases[k])
            .collect();
        softmax_in_place(&mut logits);
        logits
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.clusters.hash(&mut h);
        self.dim.hash(&mut h);
        for v in self.iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// An image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// False only when normalization met an all-zero vector.
    pub normalized: bool,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// L2-normalizes `values`, leaving an all-zero vector as is.
    pub fn normalize(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > NORM_EPS {
            values.iter_mut().for_each(|v| *v /= norm);
            Self {
                values,
                normalized: true,
            }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
            Self {
                values,
                normalized: false,
            }
        }
    }
}

/// Intermediate values of one forward pass, needed by [`vlad_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    columns: ColumnFeatureSet,
    /// `N × K` soft assignments.
    assignments: Vec<f64>,
    /// `K × D` residual sums before normalization.
    residuals: Vec<f64>,
    /// Per-cluster L2 norms of `residuals`.
    intra_norms: Vec<f64>,
    /// Flattened intra-normalized residuals.
    intra: Vec<f64>,
    power_norm: bool,
    /// Norm of the vector entering the final L2 normalization.
    global_norm: f64,
    output: Vec<f64>,
    params_fingerprint: u64,
}

impl ForwardCache {
    pub fn assignments(&self) -> &[f64] {
        &self.assignments
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn intra_norms(&self) -> &[f64] {
        &self.intra_norms
    }

    pub fn columns(&self) -> &ColumnFeatureSet {
        &self.columns
    }
}

fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

pub fn vlad_forward(
    columns: &ColumnFeatureSet,
    params: &VladParams,
    power_norm: bool,
) -> Result<(Descriptor, ForwardCache)> {
    if columns.dim() != params.dim {
        return Err(Error::dim(format!(
            "columns have dim {}, parameters expect {}",
            columns.dim(),
            params.dim
        )));
    }
    let (k_count, dim) = (params.clusters, params.dim);
    let n = columns.count();

    let mut assignments = Vec::with_capacity(n * k_count);
    let mut weighted_sum = vec![0.0; k_count * dim];
    let mut mass = vec![0.0; k_count];
    for x in columns.rows() {
        let a = params.soft_assign(x);
        for (k, &ak) in a.iter().enumerate() {
            mass[k] += ak;
            for (s, &xj) in weighted_sum[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *s += ak * xj;
            }
        }
        assignments.extend(a);
    }

    let mut residuals = weighted_sum;
    for k in 0..k_count {
        for (r, c) in residuals[k * dim..(k + 1) * dim]
            .iter_mut()
            .zip(params.center(k))
        {
            *r -= mass[k] * c;
        }
    }

    let mut intra = residuals.clone();
    let mut intra_norms = Vec::with_capacity(k_count);
    for block in intra.chunks_exact_mut(dim) {
        let norm = l2_norm(block);
        if norm > NORM_EPS {
            block.iter_mut().for_each(|v| *v /= norm);
        } else {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        intra_norms.push(norm);
    }

    let pre_global: Vec<f64> = if power_norm {
        intra.iter().map(|&v| signed_sqrt(v)).collect()
    } else {
        intra.clone()
    };
    let global_norm = l2_norm(&pre_global);
    let descriptor = Descriptor::normalize(pre_global);

    let cache = ForwardCache {
        columns: columns.clone(),
        assignments,
        residuals,
        intra_norms,
        intra,
        power_norm,
        global_norm,
        output: descriptor.values.clone(),
        params_fingerprint: params.fingerprint(),
    };
    Ok((descriptor, cache))
}

/// Gradients of a scalar loss with respect to the parameters and the input
/// columns, given its gradient with respect to the descriptor.
pub fn vlad_backward(
    cache: &ForwardCache,
    params: &VladParams,
    grad_descriptor: &[f64],
) -> Result<(VladParams, Vec<f64>)> {
    let (k_count, dim) = (params.clusters, params.dim);
    let n = cache.columns.count();
    if cache.columns.dim() != dim
        || cache.assignments.len() != n * k_count
        || cache.residuals.len() != k_count * dim
    {
        return Err(Error::Cache(
            "cache shapes do not match the parameters".into(),
        ));
    }
    if cache.params_fingerprint != params.fingerprint() {
        return Err(Error::Cache(
            "parameters changed since the forward pass".into(),
        ));
    }
    if grad_descriptor.len() != k_count * dim {
        return Err(Error::dim(format!(
            "descriptor gradient has length {}, expected {}",
            grad_descriptor.len(),
            k_count * dim
        )));
    }

    // Final L2 normalization: y = p / r.
    let y = &cache.output;
    let r = cache.global_norm;
    let mut grad = vec![0.0; k_count * dim];
    if r > NORM_EPS {
        let proj = dot(y, grad_descriptor);
        for ((g, &gy), &yv) in grad.iter_mut().zip(grad_descriptor).zip(y) {
            *g = (gy - yv * proj) / r;
        }
    }

    // Signed square root; derivative taken as 0 at 0.
    if cache.power_norm {
        for (g, &u) in grad.iter_mut().zip(&cache.intra) {
            *g = if u == 0.0 {
                0.0
            } else {
                *g * 0.5 / u.abs().sqrt()
            };
        }
    }

    // Intra-normalization of each cluster block.
    let mut grad_residuals = vec![0.0; k_count * dim];
    for k in 0..k_count {
        let norm = cache.intra_norms[k];
        if norm <= NORM_EPS {
            continue;
        }
        let u = &cache.intra[k * dim..(k + 1) * dim];
        let gu = &grad[k * dim..(k + 1) * dim];
        let proj = dot(u, gu);
        for ((gv, &g), &uv) in grad_residuals[k * dim..(k + 1) * dim]
            .iter_mut()
            .zip(gu)
            .zip(u)
        {
            *gv = (g - uv * proj) / norm;
        }
    }

    let mut grads = VladParams::zeros(k_count, dim);
    let mut grad_columns = vec![0.0; n * dim];
    let mut mass = vec![0.0; k_count];
    let mut grad_assign = vec![0.0; k_count];
    for (i, x) in cache.columns.rows().enumerate() {
        let a = &cache.assignments[i * k_count..(i + 1) * k_count];
        let gx = &mut grad_columns[i * dim..(i + 1) * dim];
        for k in 0..k_count {
            let gv = &grad_residuals[k * dim..(k + 1) * dim];
            let c = params.center(k);
            mass[k] += a[k];
            let mut ga = 0.0;
            for j in 0..dim {
                ga += gv[j] * (x[j] - c[j]);
                gx[j] += a[k] * gv[j];
            }
            grad_assign[k] = ga;
        }
        // Softmax Jacobian.
        let mean = dot(a, &grad_assign);
        for k in 0..k_count {
            let gs = a[k] * (grad_assign[k] - mean);
            grads.biases[k] += gs;
            let w = params.weight(k);
            let gw = &mut grads.weights[k * dim..(k + 1) * dim];
            for j in 0..dim {
                gw[j] += gs * x[j];
                gx[j] += gs * w[j];
            }
        }
    }
    for k in 0..k_count {
        for j in 0..dim {
            grads.centers[k * dim + j] = -mass[k] * grad_residuals[k * dim + j];
        }
    }
    Ok((grads, grad_columns))
}

/// Descriptor of pre-computed columns, without keeping the cache.
pub fn describe_columns(
    columns: &ColumnFeatureSet,
    params: &VladParams,
    power_norm: bool,
) -> Result<Descriptor> {
    vlad_forward(columns, params, power_norm).map(|(d, _)| d)
}

/// Descriptor of one image given its feature maps at one or more
/// resolutions.
pub fn describe_image(
    maps: &[FeatureMap],
    mode: PoolingMode,
    params: &VladParams,
    power_norm: bool,
) -> Result<Descriptor> {
    if maps.is_empty() {
        return Err(Error::dim("describe_image needs at least one feature map"));
    }
    let descriptors = maps
        .iter()
        .map(|map| {
            if map.channels() != params.dim {
                return Err(Error::dim(format!(
                    "feature map has {} channels, parameters expect {}",
                    map.channels(),
                    params.dim
                )));
            }
            describe_columns(&multiscale_columns(map, mode)?, params, power_norm)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_multires(&descriptors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut impl Rng, k: usize, d: usize) -> VladParams {
        let mut v = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        VladParams::new(k, d, v(k * d), v(k * d), v(k)).unwrap()
    }

    fn random_columns(rng: &mut impl Rng, n: usize, d: usize) -> ColumnFeatureSet {
        ColumnFeatureSet::new(d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn vgg_scale_length() {
        let params = VladParams::zeros(64, 512);
        assert_eq!(params.descriptor_len(), 32768);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cols = random_columns(&mut rng, 3, 512);
        let (d, _) = vlad_forward(&cols, &params, false).unwrap();
        assert_eq!(d.len(), 32768);
    }

    #[test]
    fn point_at_its_center_gives_zero_descriptor() {
        let centers = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0];
        let params = VladParams::from_centers(3, 2, centers, 50.0);
        let cols = ColumnFeatureSet::from_rows(&[[0.0, 0.0]]).unwrap();
        let (d, cache) = vlad_forward(&cols, &params, false).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert!(!d.normalized);
        assert!(cache.intra_norms().iter().all(|&n| n <= NORM_EPS));

        let (g, gx) = vlad_backward(&cache, &params, &[1.0; 6]).unwrap();
        assert!(g.iter().chain(&gx).all(|&v| v == 0.0));
    }

    #[test]
    fn assignments_sum_to_one_and_output_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(&mut rng, 4, 6);
        let cols = random_columns(&mut rng, 9, 6);
        for power in [false, true] {
            let (d, cache) = vlad_forward(&cols, &params, power).unwrap();
            for row in cache.assignments().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!((d.norm() - 1.0).abs() < 1e-6);
            assert!(d.normalized);
        }
    }

    #[test]
    fn dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 3, 5);
        let cols = random_columns(&mut rng, 4, 4);
        assert!(matches!(
            vlad_forward(&cols, &params, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, 3, 5);
        let cols = random_columns(&mut rng, 7, 5);
        let (_, cache) = vlad_forward(&cols, &params, true).unwrap();
        let (g, gx) = vlad_backward(&cache, &params, &[0.0; 15]).unwrap();
        assert!(g.iter().chain(&gx).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = random_params(&mut rng, 3, 5);
        let cols = random_columns(&mut rng, 7, 5);
        let (_, cache) = vlad_forward(&cols, &params, false).unwrap();
        params.biases[0] += 1.0;
        assert!(matches!(
            vlad_backward(&cache, &params, &[0.0; 15]),
            Err(Error::Cache(_))
        ));
        let other = random_params(&mut rng, 4, 5);
        assert!(matches!(
            vlad_backward(&cache, &other, &[0.0; 20]),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn describe_image_single_and_duplicate_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(&mut rng, 3, 4);
        let map = FeatureMap::from_fn(5, 5, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let direct = describe_columns(
            &multiscale_columns(&map, PoolingMode::Both).unwrap(),
            &params,
            true,
        )
        .unwrap();
        let one =
            describe_image(std::slice::from_ref(&map), PoolingMode::Both, &params, true).unwrap();
        assert_eq!(one, direct);
        let two = describe_image(&[map.clone(), map], PoolingMode::Both, &params, true).unwrap();
        for (a, b) in two.values.iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn describe_image_multires_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(&mut rng, 4, 8);
        let maps: Vec<FeatureMap> = [14, 21, 31]
            .iter()
            .map(|&s| FeatureMap::from_fn(s, s, 8, |_, _, _| rng.random_range(0.0..2.0)).unwrap())
            .collect();
        let d = describe_image(&maps, PoolingMode::Both, &params, true).unwrap();
        assert!(d.values.iter().all(|v| v.is_finite()));
        assert!((d.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn describe_image_errors() {
        let params = VladParams::zeros(2, 3);
        assert!(describe_image(&[], PoolingMode::Both, &params, false).is_err());
        let map = FeatureMap::new(3, 3, 2, vec![0.0; 18]).unwrap();
        assert!(matches!(
            describe_image(&[map], PoolingMode::Both, &params, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(VladParams::new(1, 2, vec![0.0; 2], vec![0.0; 2], vec![0.0]).is_err());
        assert!(VladParams::new(2, 2, vec![0.0; 4], vec![0.0; 4], vec![0.0]).is_err());
        assert!(matches!(
            VladParams::new(2, 1, vec![0.0, f64::NAN], vec![0.0; 2], vec![0.0; 2]),
            Err(Error::NonFinite { index: 1 })
        ));
    }
}

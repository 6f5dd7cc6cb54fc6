//! Finite-difference checks of the analytic gradients.
//!
//! Every check compares an analytic gradient against central differences of
//! the forward function alone. The error of a parameter group is
//! `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|)`,
//! i.e. the worst absolute deviation relative to the group's gradient scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::feature_map::FeatureMap;
use crate::netvlad::{vlad_backward, vlad_forward, VladParams};
use crate::pooling::{multiscale_backward, multiscale_columns, ColumnFeatureSet, PoolingMode};
use crate::trainer::{triplet_gradient, triplet_loss};

pub const VLAD_STEP: f64 = 1e-6;
pub const VLAD_TOLERANCE: f64 = 1e-5;
pub const TRIPLET_STEP: f64 = 1e-6;
pub const TRIPLET_TOLERANCE: f64 = 1e-7;
pub const POOLING_STEP: f64 = 1e-5;
pub const POOLING_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_STEP: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Central difference of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Worst deviation relative to the gradient scale; 0 when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheck {
    fn new(name: impl Into<String>, errors: impl IntoIterator<Item = f64>, tolerance: f64) -> Self {
        let max_relative_error = errors.into_iter().fold(0.0, f64::max);
        Self {
            name: name.into(),
            max_relative_error,
            tolerance,
            passed: max_relative_error < tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>14} {:>10}  status\n",
            "check", "max rel err", "tolerance"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} {:>14.3e} {:>10.0e}  {}\n",
                c.name,
                c.max_relative_error,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Sizes for [`run_all`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckDims {
    pub columns: usize,
    pub dim: usize,
    pub clusters: usize,
    pub instances: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            columns: 7,
            dim: 5,
            clusters: 3,
            instances: 20,
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_params(rng: &mut impl Rng, clusters: usize, dim: usize) -> VladParams {
    VladParams::new(
        clusters,
        dim,
        uniform(rng, clusters * dim, -1.0, 1.0),
        uniform(rng, clusters * dim, -2.0, 2.0),
        uniform(rng, clusters, -1.0, 1.0),
    )
    .expect("finite random parameters")
}

pub fn random_columns(rng: &mut impl Rng, count: usize, dim: usize) -> ColumnFeatureSet {
    ColumnFeatureSet::new(dim, uniform(rng, count * dim, -1.0, 1.0)).expect("finite columns")
}

/// Errors for one NetVLAD instance, per group: centers, weights, biases,
/// columns. `scale_bug` multiplies the analytic weight gradient, as a
/// negative control.
pub fn vlad_instance_errors(
    rng: &mut impl Rng,
    dims: GradCheckDims,
    power_norm: bool,
    scale_bug: f64,
) -> Result<[f64; 4]> {
    let params = random_params(rng, dims.clusters, dims.dim);
    let columns = random_columns(rng, dims.columns, dims.dim);
    let probe = uniform(rng, dims.clusters * dims.dim, -1.0, 1.0);
    let objective = |p: &VladParams, c: &ColumnFeatureSet| -> f64 {
        let (d, _) = vlad_forward(c, p, power_norm).expect("forward");
        d.values.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };

    let (_, cache) = vlad_forward(&columns, &params, power_norm)?;
    let (mut grads, grad_columns) = vlad_backward(&cache, &params, &probe)?;
    grads.weights.iter_mut().for_each(|g| *g *= scale_bug);

    let (k, d) = (dims.clusters, dims.dim);
    let with = |f: &dyn Fn(&mut VladParams, &[f64]), x: &[f64]| {
        let mut p = params.clone();
        f(&mut p, x);
        objective(&p, &columns)
    };
    let numeric_centers = central_differences(&params.centers, VLAD_STEP, |x| {
        with(&|p, x| p.centers.copy_from_slice(x), x)
    });
    let numeric_weights = central_differences(&params.weights, VLAD_STEP, |x| {
        with(&|p, x| p.weights.copy_from_slice(x), x)
    });
    let numeric_biases = central_differences(&params.biases, VLAD_STEP, |x| {
        with(&|p, x| p.biases.copy_from_slice(x), x)
    });
    let numeric_columns = central_differences(columns.values(), VLAD_STEP, |x| {
        objective(
            &params,
            &ColumnFeatureSet::new(d, x.to_vec()).expect("columns"),
        )
    });
    debug_assert_eq!(grads.biases.len(), k);
    Ok([
        relative_error(&grads.centers, &numeric_centers),
        relative_error(&grads.weights, &numeric_weights),
        relative_error(&grads.biases, &numeric_biases),
        relative_error(&grad_columns, &numeric_columns),
    ])
}

/// NetVLAD checks over `dims.instances` seeded instances.
pub fn check_vlad(
    seed: u64,
    dims: GradCheckDims,
    power_norm: bool,
    scale_bug: f64,
) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..dims.instances {
        let errs = vlad_instance_errors(&mut rng, dims, power_norm, scale_bug)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let suffix = if power_norm { " (power)" } else { "" };
    Ok(["centers", "weights", "biases", "columns"]
        .iter()
        .zip(worst)
        .map(|(name, e)| GradCheck::new(format!("netvlad {name}{suffix}"), [e], VLAD_TOLERANCE))
        .collect())
}

/// Triplet loss gradients for random triplets of length `dim` whose margin is
/// violated.
pub fn check_triplet_loss(seed: u64, dim: usize, instances: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    let mut checked = 0;
    while checked < instances {
        let q = uniform(&mut rng, dim, -1.0, 1.0);
        let p = uniform(&mut rng, dim, -1.0, 1.0);
        let n = uniform(&mut rng, dim, -1.0, 1.0);
        let margin = 0.1;
        let r = triplet_loss(&q, &p, &n, margin)?;
        if r.loss < 1e-3 {
            continue;
        }
        let f = |q: &[f64], p: &[f64], n: &[f64]| triplet_loss(q, p, n, margin).expect("loss").loss;
        let nq = central_differences(&q, TRIPLET_STEP, |x| f(x, &p, &n));
        let np = central_differences(&p, TRIPLET_STEP, |x| f(&q, x, &n));
        let nn = central_differences(&n, TRIPLET_STEP, |x| f(&q, &p, x));
        for (w, e) in worst.iter_mut().zip([
            relative_error(&r.grad_q, &nq),
            relative_error(&r.grad_p, &np),
            relative_error(&r.grad_n, &nn),
        ]) {
            *w = w.max(e);
        }
        checked += 1;
    }
    Ok(["q", "p", "n"]
        .iter()
        .zip(worst)
        .map(|(name, e)| GradCheck::new(format!("triplet grad_{name}"), [e], TRIPLET_TOLERANCE))
        .collect())
}

/// A map whose entries are a shuffled grid with spacing 0.01, so no window
/// has ties and small steps never change an argmax.
pub fn distinct_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    let mut values: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.01).collect();
    values.shuffle(rng);
    FeatureMap::new(h, w, c, values).expect("finite map")
}

pub fn check_pooling(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for mode in PoolingMode::ALL {
        let mut errors = Vec::new();
        for _ in 0..instances {
            let (h, w, c) = (
                rng.random_range(3..8),
                rng.random_range(3..8),
                rng.random_range(1..4),
            );
            let map = distinct_map(&mut rng, h, w, c);
            let probe = uniform(&mut rng, mode.column_count(h, w) * c, -1.0, 1.0);
            let analytic = multiscale_backward(&map, mode, &probe)?;
            let numeric = central_differences(map.values(), POOLING_STEP, |x| {
                let m = FeatureMap::new(h, w, c, x.to_vec()).expect("map");
                let cols = multiscale_columns(&m, mode).expect("columns");
                cols.values().iter().zip(&probe).map(|(a, b)| a * b).sum()
            });
            errors.push(relative_error(analytic.values(), &numeric));
        }
        checks.push(GradCheck::new(
            format!("pooling {mode}"),
            errors,
            POOLING_TOLERANCE,
        ));
    }
    Ok(checks)
}

/// Triplet loss through three NetVLAD streams with shared parameters.
pub fn check_end_to_end(seed: u64, dims: GradCheckDims) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < dims.instances && attempts < 100 * dims.instances.max(1) {
        attempts += 1;
        let params = random_params(&mut rng, dims.clusters, dims.dim);
        let cols: Vec<ColumnFeatureSet> = (0..3)
            .map(|_| random_columns(&mut rng, dims.columns, dims.dim))
            .collect();
        // A margin large enough that the hinge is active.
        let margin = 1.0;
        let (loss, grads) = triplet_gradient(&params, &cols[0], &cols[1], &cols[2], margin)?;
        if loss < 1e-3 {
            continue;
        }
        let f = |p: &VladParams| {
            triplet_gradient(p, &cols[0], &cols[1], &cols[2], margin)
                .expect("loss")
                .0
        };
        let flat: Vec<f64> = params.iter().copied().collect();
        let numeric = central_differences(&flat, END_TO_END_STEP, |x| {
            let mut p = params.clone();
            p.iter_mut().zip(x).for_each(|(a, b)| *a = *b);
            f(&p)
        });
        let analytic: Vec<f64> = grads.iter().copied().collect();
        errors.push(relative_error(&analytic, &numeric));
        checked += 1;
    }
    Ok(vec![GradCheck::new(
        "triplet through netvlad",
        errors,
        END_TO_END_TOLERANCE,
    )])
}

/// Every suite at the given sizes.
pub fn run_all(seed: u64, dims: GradCheckDims, scale_bug: f64) -> Result<GradCheckReport> {
    let mut checks = check_vlad(seed, dims, false, scale_bug)?;
    checks.extend(check_vlad(seed, dims, true, scale_bug)?);
    checks.extend(check_triplet_loss(seed, 32, dims.instances)?);
    checks.extend(check_pooling(seed, dims.instances)?);
    checks.extend(check_end_to_end(seed, dims)?);
    Ok(GradCheckReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_differences_of_a_quadratic() {
        let g = central_differences(&[1.0, -2.0], 1e-4, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn vlad_gradients() {
        for power in [false, true] {
            for check in check_vlad(11, GradCheckDims::default(), power, 1.0).unwrap() {
                assert!(check.passed, "{check:?}");
            }
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        let dims = GradCheckDims {
            instances: 3,
            ..GradCheckDims::default()
        };
        let checks = check_vlad(11, dims, false, 1.001).unwrap();
        assert!(
            !checks
                .iter()
                .find(|c| c.name == "netvlad weights")
                .unwrap()
                .passed
        );
    }

    #[test]
    fn triplet_and_pooling_and_chain() {
        for check in check_triplet_loss(1, 32, 10)
            .unwrap()
            .into_iter()
            .chain(check_pooling(2, 10).unwrap())
            .chain(
                check_end_to_end(
                    3,
                    GradCheckDims {
                        instances: 5,
                        ..GradCheckDims::default()
                    },
                )
                .unwrap(),
            )
        {
            assert!(check.passed, "{check:?}");
        }
    }
}

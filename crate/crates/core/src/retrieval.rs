//! Descriptor index, exact search, multi-resolution combination and mAP.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::io::manifest::{DatasetManifest, Relevance, Split};
use crate::io::tensor::{read_tensor, write_tensor};
use crate::netvlad::{describe_image, dot, Descriptor, VladParams};
use crate::pooling::PoolingMode;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Sum of the descriptors, L2-renormalized. A single descriptor is returned
/// unchanged.
pub fn combine_multires(descriptors: &[Descriptor]) -> Result<Descriptor> {
    let (first, rest) = descriptors
        .split_first()
        .ok_or_else(|| Error::dim("nothing to combine"))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut sum = first.values.clone();
    for d in rest {
        if d.len() != sum.len() {
            return Err(Error::dim(format!(
                "cannot combine descriptors of length {} and {}",
                sum.len(),
                d.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(&d.values) {
            *s += v;
        }
    }
    Ok(Descriptor::normalize(sum))
}

/// Immutable database of image descriptors, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    matrix: Vec<f64>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexIds {
    ids: Vec<String>,
}

impl DescriptorIndex {
    pub fn new(ids: Vec<String>, descriptors: Vec<Descriptor>) -> Result<Self> {
        if ids.len() != descriptors.len() {
            return Err(Error::dim(format!(
                "{} ids for {} descriptors",
                ids.len(),
                descriptors.len()
            )));
        }
        let dim = descriptors.first().map_or(0, Descriptor::len);
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Domain(format!("duplicate id {id} in index")));
            }
        }
        let mut matrix = Vec::with_capacity(dim * descriptors.len());
        for (id, d) in ids.iter().zip(&descriptors) {
            if d.len() != dim {
                return Err(Error::dim(format!(
                    "descriptor of {id} has length {}, expected {dim}",
                    d.len()
                )));
            }
            let norm = d.norm();
            if norm != 0.0 && (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Domain(format!("descriptor of {id} has norm {norm}")));
            }
            matrix.extend_from_slice(&d.values);
        }
        Ok(Self { ids, matrix, dim })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `descriptors.msvf` and `ids.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let values: Vec<f32> = self.matrix.iter().map(|&v| v as f32).collect();
        write_tensor(
            dir.join("descriptors.msvf"),
            &[self.ids.len(), self.dim],
            &values,
        )?;
        let ids = serde_json::to_string_pretty(&IndexIds {
            ids: self.ids.clone(),
        })?;
        let path = dir.join("ids.json");
        fs::write(&path, ids).map_err(|e| Error::io(&path, e))
    }

    /// Loads an index written by [`DescriptorIndex::save`]. Rows are
    /// renormalized after the float32 round trip.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tensor = read_tensor(dir.join("descriptors.msvf"))?;
        let [count, dim] = tensor.shape[..] else {
            return Err(Error::dim(format!(
                "index matrix has shape {:?}",
                tensor.shape
            )));
        };
        let path = dir.join("ids.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ids: IndexIds = serde_json::from_str(&text)?;
        if ids.ids.len() != count {
            return Err(Error::dim(format!(
                "{} ids for {count} rows",
                ids.ids.len()
            )));
        }
        let descriptors = tensor
            .values
            .chunks_exact(dim)
            .map(|row| Descriptor::normalize(row.iter().map(|&v| f64::from(v)).collect()))
            .collect();
        Self::new(ids.ids, descriptors)
    }
}

/// Feature maps of one image at each requested resolution.
pub fn load_image_maps(
    manifest: &DatasetManifest,
    id: &str,
    resolutions: &[u32],
) -> Result<Vec<FeatureMap>> {
    resolutions
        .iter()
        .map(|&resolution| {
            let entry = manifest
                .find(id, resolution)
                .ok_or_else(|| Error::MissingFeature {
                    id: id.to_string(),
                    resolution,
                })?;
            manifest.load_map(entry)
        })
        .collect()
}

fn describe_ids(
    manifest: &DatasetManifest,
    ids: &[&str],
    params: &VladParams,
    mode: PoolingMode,
    resolutions: &[u32],
    power_norm: bool,
) -> Result<Vec<Descriptor>> {
    if resolutions.is_empty() {
        return Err(Error::Config("at least one resolution is required".into()));
    }
    // Fail on missing files before spending time on descriptors.
    for id in ids {
        for &resolution in resolutions {
            if manifest.find(id, resolution).is_none() {
                return Err(Error::MissingFeature {
                    id: id.to_string(),
                    resolution,
                });
            }
        }
    }
    ids.par_iter()
        .map(|id| {
            let maps = load_image_maps(manifest, id, resolutions)?;
            describe_image(&maps, mode, params, power_norm)
        })
        .collect()
}

/// One combined descriptor per gallery image, rows in sorted id order.
pub fn build_index(
    manifest: &DatasetManifest,
    params: &VladParams,
    mode: PoolingMode,
    resolutions: &[u32],
    power_norm: bool,
) -> Result<DescriptorIndex> {
    let ids = manifest.ids(Split::Gallery);
    let descriptors = describe_ids(manifest, &ids, params, mode, resolutions, power_norm)?;
    DescriptorIndex::new(ids.into_iter().map(String::from).collect(), descriptors)
}

/// Gallery ids by descending inner product with `query`, ties by id. For unit
/// vectors this is ascending Euclidean distance.
pub fn query_index(
    index: &DescriptorIndex,
    query: &Descriptor,
    top_k: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    if query.len() != index.dim {
        return Err(Error::dim(format!(
            "query has length {}, index rows have {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot(index.row(i), &query.values)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    let keep = top_k.unwrap_or(scored.len()).min(scored.len());
    Ok(scored
        .into_iter()
        .take(keep)
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

/// Average precision of a ranking: junk is dropped, then precision is taken
/// at the rank of each positive and averaged over all positives. Positives
/// that never appear contribute zero.
pub fn average_precision<S: AsRef<str>>(
    ranked: &[S],
    positives: &BTreeSet<String>,
    junk: &BTreeSet<String>,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Domain(
            "average precision needs at least one positive".into(),
        ));
    }
    if let Some(id) = positives.intersection(junk).next() {
        return Err(Error::Domain(format!("{id} is both positive and junk")));
    }
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut total = 0.0;
    let mut seen = HashSet::new();
    for id in ranked.iter().map(AsRef::as_ref) {
        if junk.contains(id) || !seen.insert(id) {
            continue;
        }
        rank += 1;
        if positives.contains(id) {
            hits += 1;
            total += hits as f64 / rank as f64;
        }
    }
    Ok(total / positives.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_query: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_aps(per_query: BTreeMap<String, f64>) -> Self {
        let map = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self { map, per_query }
    }

    pub fn query_count(&self) -> usize {
        self.per_query.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// mAP over precomputed query descriptors.
pub fn evaluate_descriptors(
    index: &DescriptorIndex,
    queries: &[(String, Descriptor)],
    relevance: &BTreeMap<String, Relevance>,
) -> Result<EvalReport> {
    let mut per_query = BTreeMap::new();
    for (id, descriptor) in queries {
        let rel = relevance
            .get(id)
            .ok_or_else(|| Error::MissingRelevance(id.clone()))?;
        let ranking = query_index(index, descriptor, None)?;
        let ranked: Vec<&str> = ranking.iter().map(|(id, _)| id.as_str()).collect();
        per_query.insert(
            id.clone(),
            average_precision(&ranked, &rel.positives, &rel.junk)?,
        );
    }
    Ok(EvalReport::from_aps(per_query))
}

/// Describes every query image the same way as the gallery and reports mAP.
pub fn evaluate(
    manifest: &DatasetManifest,
    index: &DescriptorIndex,
    params: &VladParams,
    mode: PoolingMode,
    resolutions: &[u32],
    power_norm: bool,
) -> Result<EvalReport> {
    let ids = manifest.ids(Split::Query);
    if ids.is_empty() {
        return Err(Error::Config("manifest has no query images".into()));
    }
    if let Some(id) = ids.iter().find(|id| !manifest.relevance.contains_key(**id)) {
        return Err(Error::MissingRelevance(id.to_string()));
    }
    let descriptors = describe_ids(manifest, &ids, params, mode, resolutions, power_norm)?;
    let queries: Vec<(String, Descriptor)> =
        ids.into_iter().map(String::from).zip(descriptors).collect();
    evaluate_descriptors(index, &queries, &manifest.relevance)
}

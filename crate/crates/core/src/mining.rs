//! Difficulty-aware triplet mining.
//!
//! For every query of a sampled batch the other images are ranked by squared
//! Euclidean distance. Walking that ranking, let `n_rank` be the rank
//! (1-based) of the first image with a different label:
//!
//! * **case A**: if `n_rank > 1`, with probability `semi_hard_probability`
//!   emit `(q, rank n_rank - 1, rank n_rank)`;
//! * **case B**: otherwise find the first same-label image after the
//!   negative, at `p_rank`, and emit `(q, rank p_rank, rank n_rank)`;
//! * **case C**: a case-B candidate with `p_rank - n_rank >= threshold` is
//!   discarded.
//!
//! Candidates that classify as easy are dropped, and only the first triplet
//! per query label survives.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub mining_batch_size: usize,
    pub num_classes: usize,
    /// Rank gap at which a hard candidate is discarded.
    pub threshold: usize,
    pub margin: f64,
    pub semi_hard_probability: f64,
    pub mini_batch_size: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            mining_batch_size: 2048,
            num_classes: 512,
            threshold: 10,
            margin: 0.1,
            semi_hard_probability: 0.5,
            mini_batch_size: 24,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.mining_batch_size < 2 {
            return fail("mining_batch_size must be at least 2");
        }
        if self.num_classes < 2 || self.num_classes > self.mining_batch_size {
            return fail("num_classes must lie in [2, mining_batch_size]");
        }
        if self.threshold < 1 {
            return fail("threshold must be at least 1");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail("margin must be positive");
        }
        if !(0.0..=1.0).contains(&self.semi_hard_probability) {
            return fail("semi_hard_probability must lie in [0, 1]");
        }
        if self.mini_batch_size < 1 {
            return fail("mini_batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    SemiHard,
    Hard,
}

/// Difficulty of a triplet with squared distances `d_qp` and `d_qn`.
pub fn classify_triplet(d_qp: f64, d_qn: f64, alpha: f64) -> Result<Difficulty> {
    for (name, v) in [("d(q,p)", d_qp), ("d(q,n)", d_qn)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "{name} = {v} is not a finite non-negative distance"
            )));
        }
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Domain(format!("margin {alpha} must be positive")));
    }
    Ok(if d_qn < d_qp {
        Difficulty::Hard
    } else if d_qn < d_qp + alpha {
        Difficulty::SemiHard
    } else {
        Difficulty::Easy
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub q: usize,
    pub p: usize,
    pub n: usize,
    pub difficulty: Difficulty,
}

/// All other images ordered by squared distance to the query, ties by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRanking {
    pub query: usize,
    pub neighbors: Vec<(usize, f64)>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rank_neighbors<R: AsRef<[f64]> + Sync>(descriptors: &[R], query: usize) -> NeighborRanking {
    let q = descriptors[query].as_ref();
    let mut neighbors: Vec<(usize, f64)> = descriptors
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, d)| (i, sq_dist(q, d.as_ref())))
        .collect();
    neighbors.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    NeighborRanking { query, neighbors }
}

/// What one query's ranking offers, before any coin flip.
#[derive(Debug, Clone, Copy)]
struct Candidates {
    /// 1-based rank of the first negative and its (index, distance).
    negative: Option<(usize, (usize, f64))>,
    /// Neighbor just before the first negative, when it is not rank 1.
    before_negative: Option<(usize, f64)>,
    /// First positive after the negative: (rank, (index, distance)).
    positive_after: Option<(usize, (usize, f64))>,
}

fn candidates(ranking: &NeighborRanking, labels: &[i64]) -> Candidates {
    let query_label = labels[ranking.query];
    let mut out = Candidates {
        negative: None,
        before_negative: None,
        positive_after: None,
    };
    for (pos, &(j, d)) in ranking.neighbors.iter().enumerate() {
        let rank = pos + 1;
        let same = labels[j] == query_label;
        match out.negative {
            None if !same => {
                out.negative = Some((rank, (j, d)));
                if rank > 1 {
                    out.before_negative = Some(ranking.neighbors[pos - 1]);
                }
            }
            Some(_) if same => {
                out.positive_after = Some((rank, (j, d)));
                break;
            }
            _ => {}
        }
    }
    out
}

/// Runs one mining round with an explicit coin-flip generator.
pub fn mine_triplets_with<R: AsRef<[f64]> + Sync>(
    descriptors: &[R],
    labels: &[i64],
    config: &MiningConfig,
    coin: &mut impl Rng,
) -> Result<Vec<Triplet>> {
    if descriptors.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} descriptors but {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    if descriptors.len() < 2 || labels.iter().collect::<HashSet<_>>().len() < 2 {
        return Ok(Vec::new());
    }

    let per_query: Vec<Candidates> = (0..descriptors.len())
        .into_par_iter()
        .map(|i| candidates(&rank_neighbors(descriptors, i), labels))
        .collect();

    let mut triplets = Vec::new();
    let mut classes_done = HashSet::new();
    for (q, cand) in per_query.into_iter().enumerate() {
        let Some((n_rank, (n, d_qn))) = cand.negative else {
            continue;
        };
        let chosen = match cand.before_negative {
            Some((p, d_qp)) if coin.random_bool(config.semi_hard_probability) => Some((p, d_qp)),
            _ => match cand.positive_after {
                Some((p_rank, (p, d_qp))) if p_rank - n_rank < config.threshold => Some((p, d_qp)),
                _ => None,
            },
        };
        let Some((p, d_qp)) = chosen else {
            continue;
        };
        let difficulty = classify_triplet(d_qp, d_qn, config.margin)?;
        if difficulty == Difficulty::Easy || classes_done.contains(&labels[q]) {
            continue;
        }
        classes_done.insert(labels[q]);
        triplets.push(Triplet {
            q,
            p,
            n,
            difficulty,
        });
    }
    Ok(triplets)
}

/// Mining round seeded from `config.seed`.
pub fn mine_triplets<R: AsRef<[f64]> + Sync>(
    descriptors: &[R],
    labels: &[i64],
    config: &MiningConfig,
) -> Result<Vec<Triplet>> {
    let mut coin = rng::stream(config.seed, rng::MINING_COIN, 0);
    mine_triplets_with(descriptors, labels, config, &mut coin)
}

/// Shuffles and splits into mini-batches; the last may be short.
pub fn batch_triplets(
    triplets: &[Triplet],
    mini_batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<Triplet>> {
    assert!(mini_batch_size >= 1, "mini-batch size must be positive");
    let mut shuffled = triplets.to_vec();
    shuffled.shuffle(rng);
    shuffled
        .chunks(mini_batch_size)
        .map(<[Triplet]>::to_vec)
        .collect()
}

/// Picks `num_classes` labels without replacement, then
/// `mining_batch_size` images of those labels (without replacement when
/// enough exist). Returns positions into `labels` and their labels.
pub fn sample_mining_pool(
    labels: &[i64],
    config: &MiningConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<i64>)> {
    let classes: Vec<i64> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < config.num_classes {
        return Err(Error::InsufficientClasses {
            needed: config.num_classes,
            available: classes.len(),
        });
    }
    let chosen: HashSet<i64> = index::sample(rng, classes.len(), config.num_classes)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let pool: Vec<usize> = (0..labels.len())
        .filter(|&i| chosen.contains(&labels[i]))
        .collect();
    let picks: Vec<usize> = if pool.len() >= config.mining_batch_size {
        index::sample(rng, pool.len(), config.mining_batch_size)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..config.mining_batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    };
    let picked_labels = picks.iter().map(|&i| labels[i]).collect();
    Ok((picks, picked_labels))
}

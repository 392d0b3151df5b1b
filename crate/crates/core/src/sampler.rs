//! Positive and hard-negative sample construction.
//!
//! Positives are same-token entries drawn uniformly from the anchor's own
//! cluster. Negatives avoid scanning the whole datastore: the anchor is
//! compared against cluster centers only, `N` distinct clusters are drawn from
//! the `K` nearest, and one member is drawn from each.

use rand::seq::index;
use rand::Rng;

use crate::datastore::ClusterIndex;
use crate::error::{Error, Result};

/// How cluster centers are ranked against the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenterMetric {
    /// `1 - cos(anchor, center)`; matches the training score.
    #[default]
    Cosine,
    /// Squared Euclidean distance.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub positives: usize,
    pub negatives: usize,
    pub cluster_pool: usize,
    pub metric: CenterMetric,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positives == 0 || self.negatives == 0 {
            return Err(Error::InvalidConfig("M and N must be at least 1".into()));
        }
        if self.cluster_pool < self.negatives {
            return Err(Error::InvalidConfig(format!(
                "K ({}) must be at least N ({})",
                self.cluster_pool, self.negatives
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Read access to a clustered datastore. [`ClusterIndex`] is the real
/// implementation; wrappers can count accesses.
pub trait ClusterView {
    fn dim(&self) -> usize;
    fn token_of(&self, entry: usize) -> u32;
    fn nonempty_tokens(&self) -> &[u32];
    fn center(&self, token: u32) -> Option<&[f64]>;
    fn members(&self, token: u32) -> &[usize];
}

impl ClusterView for ClusterIndex {
    fn dim(&self) -> usize {
        ClusterIndex::dim(self)
    }
    fn token_of(&self, entry: usize) -> u32 {
        ClusterIndex::token_of(self, entry)
    }
    fn nonempty_tokens(&self) -> &[u32] {
        ClusterIndex::nonempty_tokens(self)
    }
    fn center(&self, token: u32) -> Option<&[f64]> {
        ClusterIndex::center(self, token)
    }
    fn members(&self, token: u32) -> &[usize] {
        ClusterIndex::members(self, token)
    }
}

/// `M` same-token entries other than `anchor`. Drawn without replacement
/// when the cluster has at least `M` other members, with replacement
/// otherwise.
pub fn sample_positives<C, R>(
    anchor: usize,
    ci: &C,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>>
where
    C: ClusterView + ?Sized,
    R: Rng + ?Sized,
{
    let others: Vec<usize> = ci
        .members(ci.token_of(anchor))
        .iter()
        .copied()
        .filter(|&i| i != anchor)
        .collect();
    if others.is_empty() {
        return Err(Error::UnsampleableAnchor { anchor });
    }
    if others.len() >= count {
        Ok(index::sample(rng, others.len(), count)
            .into_iter()
            .map(|i| others[i])
            .collect())
    } else {
        Ok((0..count)
            .map(|_| others[rng.random_range(0..others.len())])
            .collect())
    }
}

fn center_distance(metric: CenterMetric, anchor: &[f64], center: &[f64]) -> f64 {
    match metric {
        CenterMetric::L2 => anchor
            .iter()
            .zip(center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum(),
        CenterMetric::Cosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nc = 0.0;
            for (a, c) in anchor.iter().zip(center) {
                dot += a * c;
                na += a * a;
                nc += c * c;
            }
            if na == 0.0 || nc == 0.0 {
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nc.sqrt())
            }
        }
    }
}

/// Tokens of the `pool` nearest nonempty clusters other than `anchor_token`,
/// nearest first (ties by ascending token id). Reads each candidate center
/// exactly once.
pub fn nearest_clusters<C>(
    anchor_vec: &[f64],
    anchor_token: u32,
    ci: &C,
    metric: CenterMetric,
    pool: usize,
) -> Result<Vec<u32>>
where
    C: ClusterView + ?Sized,
{
    if anchor_vec.len() != ci.dim() {
        return Err(Error::DimensionMismatch {
            expected: ci.dim(),
            found: anchor_vec.len(),
        });
    }
    let mut ranked: Vec<(f64, u32)> = ci
        .nonempty_tokens()
        .iter()
        .filter(|&&t| t != anchor_token)
        .filter_map(|&t| {
            ci.center(t)
                .map(|c| (center_distance(metric, anchor_vec, c), t))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(pool);
    Ok(ranked.into_iter().map(|(_, t)| t).collect())
}

/// `N` hard negatives: `N` distinct clusters drawn uniformly from the `K`
/// nearest centers, then one uniform member from each.
pub fn mine_hard_negatives<C, R>(
    anchor_vec: &[f64],
    anchor_token: u32,
    ci: &C,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>>
where
    C: ClusterView + ?Sized,
    R: Rng + ?Sized,
{
    let pool = nearest_clusters(anchor_vec, anchor_token, ci, cfg.metric, cfg.cluster_pool)?;
    if pool.len() < cfg.negatives {
        return Err(Error::InsufficientClusters {
            available: pool.len(),
            required: cfg.negatives,
        });
    }
    Ok(index::sample(rng, pool.len(), cfg.negatives)
        .into_iter()
        .map(|slot| {
            let members = ci.members(pool[slot]);
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// Positives and negatives for one anchor. `anchor_vec` is the anchor in the
/// same space as the cluster centers.
pub fn sample_set<C, R>(
    anchor: usize,
    anchor_vec: &[f64],
    ci: &C,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleSet>
where
    C: ClusterView + ?Sized,
    R: Rng + ?Sized,
{
    let positives = sample_positives(anchor, ci, cfg.positives, rng)?;
    let negatives = mine_hard_negatives(anchor_vec, ci.token_of(anchor), ci, cfg, rng)?;
    Ok(SampleSet {
        anchor,
        positives,
        negatives,
    })
}

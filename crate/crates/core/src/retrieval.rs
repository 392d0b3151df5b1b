//! Exact kNN search and the retrieval / interpolated token distributions.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::datastore::Datastore;
use crate::error::{Error, Result};

/// Tolerance on the `[-1, 1]` range of normalized inner products.
const SCORE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance, smaller is closer.
    L2,
    /// Inner product of unit-normalized vectors, larger is closer.
    InnerProduct,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "L2" => Ok(Metric::L2),
            "ip" | "inner-product" | "normalized-inner-product" => Ok(Metric::InnerProduct),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::InnerProduct => "ip",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Inference temperature T.
    pub temperature: f64,
    pub lambda: f64,
    pub metric: Metric,
    /// Scale λ by the mean neighbor score (inner-product metric only).
    pub adaptive_lambda: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 0.1,
            lambda: 0.5,
            metric: Metric::InnerProduct,
            adaptive_lambda: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("T must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must be in [0, 1]".into()));
        }
        if self.adaptive_lambda && self.metric != Metric::InnerProduct {
            return Err(Error::InvalidConfig(
                "adaptive lambda requires the inner-product metric".into(),
            ));
        }
        Ok(())
    }
}

/// Neighbors best-first; ties broken by ascending entry index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    /// Distance for L2, inner product for IP.
    pub scores: Vec<f64>,
    pub tokens: Vec<u32>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The best `k` neighbors (already ordered).
    pub fn truncated(&self, k: usize) -> NeighborList {
        let k = k.min(self.len());
        NeighborList {
            indices: self.indices[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
            tokens: self.tokens[..k].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn point_mass(vocab_size: usize, token: u32) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Most probable token; lowest id wins ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force index over a datastore; caches key norms for the
/// inner-product metric.
pub struct FlatIndex<'a> {
    ds: &'a Datastore,
    metric: Metric,
    keys: Vec<f64>,
    inv_norms: Vec<f64>,
}

impl<'a> FlatIndex<'a> {
    pub fn new(ds: &'a Datastore, metric: Metric) -> Self {
        let keys: Vec<f64> = ds.keys().iter().map(|&v| f64::from(v)).collect();
        let inv_norms = match metric {
            Metric::L2 => Vec::new(),
            Metric::InnerProduct => keys
                .chunks_exact(ds.dim())
                .map(|k| {
                    let n = dot(k, k).sqrt();
                    if n > 0.0 {
                        1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        Self {
            ds,
            metric,
            keys,
            inv_norms,
        }
    }

    pub fn datastore(&self) -> &Datastore {
        self.ds
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<NeighborList> {
        let dim = self.ds.dim();
        if query.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: query.len(),
            });
        }
        if self.ds.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        // (cost, index): lower cost is better for both metrics.
        let mut cand: Vec<(f64, usize)> = match self.metric {
            Metric::L2 => self
                .keys
                .chunks_exact(dim)
                .enumerate()
                .map(|(i, key)| {
                    (
                        key.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(),
                        i,
                    )
                })
                .collect(),
            Metric::InnerProduct => {
                let qn = dot(query, query).sqrt();
                if qn == 0.0 {
                    return Err(Error::DegenerateVector);
                }
                self.keys
                    .chunks_exact(dim)
                    .zip(&self.inv_norms)
                    .enumerate()
                    .map(|(i, (key, inv))| (-(dot(key, query) * inv / qn).clamp(-1.0, 1.0), i))
                    .collect()
            }
        };
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        let k = k.min(cand.len());
        if k == 0 {
            return Ok(NeighborList::default());
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_by(order);
        let sign = if self.metric == Metric::InnerProduct {
            -1.0
        } else {
            1.0
        };
        Ok(NeighborList {
            indices: cand.iter().map(|c| c.1).collect(),
            scores: cand.iter().map(|c| sign * c.0 + 0.0).collect(),
            tokens: cand.iter().map(|c| self.ds.token(c.1)).collect(),
        })
    }

    /// One search per row of `queries`, in parallel; output order matches input.
    pub fn search_batch(&self, queries: &[Vec<f64>], k: usize) -> Result<Vec<NeighborList>> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }
}

/// Exact top-`k` neighbors of `query`. Returns every entry if `k` exceeds
/// the store size.
pub fn knn_search(query: &[f64], ds: &Datastore, k: usize, metric: Metric) -> Result<NeighborList> {
    FlatIndex::new(ds, metric).search(query, k)
}

fn accumulate(tokens: &[u32], logits: &[f64], vocab_size: usize) -> TokenDistribution {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; vocab_size];
    let mut total = 0.0;
    for (&t, &l) in tokens.iter().zip(logits) {
        let w = (l - max).exp();
        probs[t as usize] += w;
        total += w;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    TokenDistribution { probs }
}

/// `p_r(v) ∝ Σ_{neighbors with token v} exp(-distance / T)`.
pub fn retrieval_distribution_l2(
    nb: &NeighborList,
    temperature: f64,
    vocab_size: usize,
) -> TokenDistribution {
    assert!(
        !nb.is_empty(),
        "retrieval distribution needs at least one neighbor"
    );
    let logits: Vec<f64> = nb.scores.iter().map(|d| -d / temperature).collect();
    accumulate(&nb.tokens, &logits, vocab_size)
}

fn check_scores(nb: &NeighborList) -> Result<()> {
    match nb.scores.iter().find(|s| !(s.abs() <= 1.0 + SCORE_SLACK)) {
        Some(&s) => Err(Error::ScoreOutOfRange(s)),
        None => Ok(()),
    }
}

/// `p_r(v) ∝ Σ_{neighbors with token v} exp(score / T)` over normalized
/// inner-product scores.
pub fn retrieval_distribution_ip(
    nb: &NeighborList,
    temperature: f64,
    vocab_size: usize,
) -> Result<TokenDistribution> {
    if nb.is_empty() {
        return Err(Error::InvalidConfig(
            "retrieval distribution needs at least one neighbor".into(),
        ));
    }
    check_scores(nb)?;
    let logits: Vec<f64> = nb.scores.iter().map(|s| s / temperature).collect();
    Ok(accumulate(&nb.tokens, &logits, vocab_size))
}

/// Confidence-scaled coefficient `λ · max(0, mean score)`.
pub fn adaptive_lambda(nb: &NeighborList, lambda: f64) -> f64 {
    if nb.is_empty() {
        return 0.0;
    }
    let mean = nb.scores.iter().sum::<f64>() / nb.len() as f64;
    (lambda * mean.clamp(0.0, 1.0)).clamp(0.0, lambda)
}

/// `(1 - λ)·p_c + λ·p_r`.
pub fn interpolate(
    pc: &TokenDistribution,
    pr: &TokenDistribution,
    lambda: f64,
) -> Result<TokenDistribution> {
    if pc.probs.len() != pr.probs.len() {
        return Err(Error::DimensionMismatch {
            expected: pc.probs.len(),
            found: pr.probs.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "interpolation weight {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(pc.clone());
    }
    if lambda == 1.0 {
        return Ok(pr.clone());
    }
    Ok(TokenDistribution {
        probs: pc
            .probs
            .iter()
            .zip(&pr.probs)
            .map(|(c, r)| (1.0 - lambda) * c + lambda * r)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Entry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nb(scores: &[f64], tokens: &[u32]) -> NeighborList {
        NeighborList {
            indices: (0..scores.len()).collect(),
            scores: scores.to_vec(),
            tokens: tokens.to_vec(),
        }
    }

    fn random_store(n: usize, dim: usize, seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| {
                Entry::new(
                    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                    (i % 7) as u32,
                )
            })
            .collect();
        Datastore::build(entries, dim, 7).unwrap()
    }

    #[test]
    fn self_match_first() {
        let ds = random_store(100, 8, 1);
        let q = ds.key_f64(17);
        let r = knn_search(&q, &ds, 5, Metric::L2).unwrap();
        assert_eq!(r.indices[0], 17);
        assert_eq!(r.scores[0], 0.0);
        let r = knn_search(&q, &ds, 5, Metric::InnerProduct).unwrap();
        assert_eq!(r.indices[0], 17);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let ds = Datastore::build(
            vec![
                Entry::new(vec![0.0, 1.0], 0),
                Entry::new(vec![1.0, 0.0], 1),
                Entry::new(vec![0.0, -1.0], 2),
            ],
            2,
            3,
        )
        .unwrap();
        let r = knn_search(&[0.0, 0.0], &ds, 3, Metric::L2).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        let r = knn_search(&[1.0, 1.0], &ds, 2, Metric::InnerProduct).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn k_larger_than_store_returns_all() {
        let ds = random_store(6, 3, 2);
        let r = knn_search(&[0.1, 0.2, 0.3], &ds, 50, Metric::L2).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.scores.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn search_errors() {
        let ds = random_store(6, 3, 2);
        assert!(matches!(
            knn_search(&[0.0], &ds, 1, Metric::L2),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            knn_search(&[0.0, 0.0, 0.0], &ds, 1, Metric::InnerProduct),
            Err(Error::DegenerateVector)
        ));
        let empty = Datastore::build(vec![], 3, 2).unwrap();
        assert!(matches!(
            knn_search(&[1.0, 0.0, 0.0], &empty, 1, Metric::L2),
            Err(Error::EmptyDatastore)
        ));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let ds = random_store(2000, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let index = FlatIndex::new(&ds, Metric::L2);
        for _ in 0..20 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut all: Vec<(f64, usize)> = (0..ds.len())
                .map(|i| {
                    (
                        ds.key_f64(i)
                            .iter()
                            .zip(&q)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum(),
                        i,
                    )
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..32].iter().map(|x| x.1).collect();
            assert_eq!(index.search(&q, 32).unwrap().indices, want);
        }
    }

    #[test]
    fn l2_distribution_examples() {
        let p = retrieval_distribution_l2(&nb(&[0.3, 1.0, 9.0], &[2, 2, 2]), 1.0, 4);
        assert_eq!(p.probs, vec![0.0, 0.0, 1.0, 0.0]);
        let p = retrieval_distribution_l2(&nb(&[0.5, 0.5], &[0, 1]), 1.0, 2);
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let p = retrieval_distribution_l2(&nb(&[0.0, 2f64.ln()], &[0, 1]), 1.0, 2);
        assert!((p.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l2_temperature_limits() {
        let list = nb(&[1.0, 2.0, 2.5, 4.0], &[0, 1, 1, 2]);
        let hot = retrieval_distribution_l2(&list, 1e6, 3);
        for (p, e) in hot.probs.iter().zip([0.25, 0.5, 0.25]) {
            assert!((p - e).abs() < 1e-5);
        }
        let cold = retrieval_distribution_l2(&list, 1e-6, 3);
        assert!((cold.probs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ip_distribution_examples() {
        let p = retrieval_distribution_ip(&nb(&[0.4, 0.4, 0.4], &[0, 1, 1]), 0.1, 2).unwrap();
        assert!((p.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        let p = retrieval_distribution_ip(&nb(&[1.0, 0.0], &[0, 1]), 1.0, 2).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.probs[0] - 0.7310585786300049).abs() < 1e-12);
        let p = retrieval_distribution_ip(&nb(&[-0.7], &[3]), 0.05, 4).unwrap();
        assert_eq!(p.probs[3], 1.0);
        assert!(matches!(
            retrieval_distribution_ip(&nb(&[1.01], &[0]), 1.0, 1),
            Err(Error::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn adaptive_lambda_examples() {
        assert_eq!(adaptive_lambda(&nb(&[1.0, 1.0], &[0, 0]), 0.7), 0.7);
        assert_eq!(adaptive_lambda(&nb(&[-0.5, 0.2], &[0, 0]), 0.7), 0.0);
        let l = adaptive_lambda(&nb(&[1.0, 0.5, 0.5, 0.0], &[0; 4]), 0.8);
        assert!((l - 0.4).abs() < 1e-15);
    }

    #[test]
    fn interpolate_examples() {
        let pc = TokenDistribution::new(vec![0.9, 0.1]);
        let pr = TokenDistribution::new(vec![0.2, 0.8]);
        assert_eq!(interpolate(&pc, &pr, 0.0).unwrap(), pc);
        assert_eq!(interpolate(&pc, &pr, 1.0).unwrap(), pr);
        let mix = interpolate(&pc, &pr, 0.5).unwrap();
        assert!((mix.probs[0] - 0.55).abs() < 1e-15 && (mix.probs[1] - 0.45).abs() < 1e-15);
        assert!(interpolate(&pc, &pr, 1.5).is_err());
        assert!(interpolate(&pc, &TokenDistribution::new(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(TokenDistribution::new(vec![0.2, 0.4, 0.4]).argmax(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        assert!(RetrievalConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RetrievalConfig {
            lambda: 1.2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RetrievalConfig {
            metric: Metric::L2,
            adaptive_lambda: true,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("l2".parse::<Metric>().unwrap(), Metric::L2);
        assert_eq!("ip".parse::<Metric>().unwrap(), Metric::InnerProduct);
        assert!("cos".parse::<Metric>().is_err());
    }
}

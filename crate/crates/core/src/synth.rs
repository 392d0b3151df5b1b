//! Synthetic datastores, a toy base predictor and the evaluation harness.
//!
//! Token `v`'s context vectors are Gaussian around a per-token center, with
//! token frequencies following a Zipf law. A multinomial logistic model over
//! the raw vectors plays the role of the base model distribution `p_c`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::adapter::{train_adapter, AdapterParams, TrainConfig};
use crate::datastore::{Datastore, Entry};
use crate::error::{Error, Result};
use crate::projection::PcaModel;
use crate::retrieval::{
    adaptive_lambda, interpolate, retrieval_distribution_ip, retrieval_distribution_l2, FlatIndex,
    Metric, NeighborList, RetrievalConfig, TokenDistribution,
};
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: u32,
    pub dim: usize,
    /// 0 gives uniform token frequencies.
    pub zipf_exponent: f64,
    /// Per-coordinate stddev of a token's vectors around its center.
    pub cluster_spread: f64,
    /// Per-coordinate stddev of the centers themselves.
    pub center_scale: f64,
    /// Confine the centers to a random `r`-dimensional subspace; the other
    /// `dim - r` directions then carry only noise. `None` uses all of `dim`.
    pub center_rank: Option<usize>,
    pub train_count: usize,
    pub heldout_count: usize,
    /// Size of the general-domain set the toy predictor is fit on.
    pub general_count: usize,
    /// In-domain centers are the general centers plus Gaussian noise with
    /// per-coordinate stddev `domain_shift · cluster_spread`.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            dim: 32,
            zipf_exponent: 1.0,
            cluster_spread: 0.8,
            center_scale: 1.0,
            center_rank: None,
            train_count: 20_000,
            heldout_count: 2_000,
            general_count: 20_000,
            domain_shift: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.train_count == 0 || self.heldout_count == 0
        {
            return Err(Error::InvalidConfig(
                "synthetic counts and dims must be at least 1".into(),
            ));
        }
        if !(self.cluster_spread > 0.0) || !(self.center_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "cluster_spread and center_scale must be positive".into(),
            ));
        }
        if !(self.zipf_exponent >= 0.0) || !(self.domain_shift >= 0.0) {
            return Err(Error::InvalidConfig(
                "zipf_exponent and domain_shift must be nonnegative".into(),
            ));
        }
        if matches!(self.center_rank, Some(r) if r == 0 || r > self.dim) {
            return Err(Error::InvalidConfig(format!(
                "center_rank must be in 1..={}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Train store, heldout queries (same in-domain centers, independent draws)
/// and the general-domain set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Datastore,
    pub heldout: Datastore,
    pub general: Datastore,
    /// In-domain centers, row-major `vocab_size × dim`.
    pub centers: Vec<f64>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite positive stddev")
}

fn draw_centers<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let (v, d) = (cfg.vocab_size as usize, cfg.dim);
    let scale = normal(cfg.center_scale);
    let Some(r) = cfg.center_rank else {
        return (0..v * d).map(|_| scale.sample(rng)).collect();
    };
    let unit = normal(1.0);
    let gauss = DMatrix::<f64>::from_fn(d, r, |_, _| unit.sample(rng));
    let basis = gauss.qr().q();
    let mut out = Vec::with_capacity(v * d);
    for _ in 0..v {
        let u: Vec<f64> = (0..r).map(|_| scale.sample(rng)).collect();
        out.extend((0..d).map(|i| (0..r).map(|j| basis[(i, j)] * u[j]).sum::<f64>()));
    }
    out
}

fn draw_split<R: Rng>(
    cfg: &SynthConfig,
    centers: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Datastore> {
    let weights: Vec<f64> = (0..cfg.vocab_size)
        .map(|v| (v as f64 + 1.0).powf(-cfg.zipf_exponent))
        .collect();
    let tokens = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = normal(cfg.cluster_spread);
    let mut keys = Vec::with_capacity(count * cfg.dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let t = tokens.sample(rng);
        let c = &centers[t * cfg.dim..(t + 1) * cfg.dim];
        keys.extend(c.iter().map(|&m| (m + noise.sample(rng)) as f32));
        labels.push(t as u32);
    }
    Datastore::from_flat(cfg.dim, cfg.vocab_size, keys, labels)
}

pub fn generate_synth(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, Stage::SynthCenters);
    let base = draw_centers(cfg, &mut rng);
    let centers = if cfg.domain_shift > 0.0 {
        let shift = normal(cfg.domain_shift * cfg.cluster_spread);
        let mut rng = stage_rng(cfg.seed, Stage::SynthShift);
        base.iter().map(|c| c + shift.sample(&mut rng)).collect()
    } else {
        base.clone()
    };
    let train = draw_split(
        cfg,
        &centers,
        cfg.train_count,
        &mut stage_rng(cfg.seed, Stage::SynthTrain),
    )?;
    let heldout = draw_split(
        cfg,
        &centers,
        cfg.heldout_count,
        &mut stage_rng(cfg.seed, Stage::SynthHeldout),
    )?;
    let general = draw_split(
        cfg,
        &base,
        cfg.general_count,
        &mut stage_rng(cfg.seed, Stage::SynthGeneral),
    )?;
    Ok(SynthData {
        train,
        heldout,
        general,
        centers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub ks: Vec<usize>,
    pub accuracies: Vec<f64>,
}

impl AccuracyCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.accuracies[i])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,accuracy")?;
        for (k, a) in self.ks.iter().zip(&self.accuracies) {
            writeln!(out, "{k},{a}")?;
        }
        Ok(())
    }
}

fn correct_fraction(nb: &NeighborList, gold: u32, k: usize) -> f64 {
    let k = k.min(nb.len());
    if k == 0 {
        return 0.0;
    }
    nb.tokens[..k].iter().filter(|&&t| t == gold).count() as f64 / k as f64
}

/// Mean over queries of the fraction of the top-`k` neighbors whose token
/// equals the query's token.
pub fn retrieval_accuracy(
    queries: &Datastore,
    store: &Datastore,
    k: usize,
    metric: Metric,
) -> Result<f64> {
    Ok(accuracy_curve(queries, store, &[k], metric)?.accuracies[0])
}

/// [`retrieval_accuracy`] at several `k` from a single search per query.
/// Queries that cannot be searched (zero vector under the inner-product
/// metric) count as fully wrong.
pub fn accuracy_curve(
    queries: &Datastore,
    store: &Datastore,
    ks: &[usize],
    metric: Metric,
) -> Result<AccuracyCurve> {
    if queries.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            found: queries.dim(),
        });
    }
    if queries.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax == 0 {
        return Err(Error::InvalidConfig("ks must contain a positive k".into()));
    }
    let index = FlatIndex::new(store, metric);
    let lists: Vec<Option<NeighborList>> = (0..queries.len())
        .into_par_iter()
        .map(|i| match index.search(&queries.key_f64(i), kmax) {
            Ok(nb) => Ok(Some(nb)),
            Err(Error::DegenerateVector) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let accuracies = ks
        .iter()
        .map(|&k| {
            let total: f64 = lists
                .iter()
                .enumerate()
                .filter_map(|(i, nb)| {
                    nb.as_ref()
                        .map(|nb| correct_fraction(nb, queries.token(i), k))
                })
                .sum();
            total / queries.len() as f64
        })
        .collect();
    Ok(AccuracyCurve {
        ks: ks.to_vec(),
        accuracies,
    })
}

/// Multinomial logistic model `p_c = softmax(W h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    vocab_size: usize,
    dim: usize,
    /// `vocab_size × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyPredictor {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(h).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, h: &[f64]) -> Result<TokenDistribution> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: h.len(),
            });
        }
        let mut l = self.logits(h);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        l.iter_mut().for_each(|x| *x = (*x - max).exp());
        let s: f64 = l.iter().sum();
        l.iter_mut().for_each(|x| *x /= s);
        Ok(TokenDistribution::new(l))
    }

    /// Fraction of `ds` whose argmax prediction equals the stored token.
    pub fn accuracy(&self, ds: &Datastore) -> Result<f64> {
        let hits = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                self.predict(&ds.key_f64(i))
                    .map(|p| (p.argmax() == ds.token(i)) as usize)
            })
            .sum::<Result<usize>>()?;
        Ok(hits as f64 / ds.len() as f64)
    }
}

const PREDICTOR_CHUNK: usize = 1024;

/// Full-batch gradient descent on mean cross-entropy. Returns the model and
/// the loss before each epoch's update.
pub fn train_toy_predictor(
    store: &Datastore,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ToyPredictor, Vec<f64>)> {
    if store.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    let (v, d) = (store.vocab_size() as usize, store.dim());
    let mut rng = stage_rng(seed, Stage::Predictor);
    let init = normal(0.01);
    let mut model = ToyPredictor {
        vocab_size: v,
        dim: d,
        weights: (0..v * d).map(|_| init.sample(&mut rng)).collect(),
        bias: vec![0.0; v],
    };
    let n = store.len();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        // Chunked partial sums reduced in order keep the result independent
        // of thread scheduling.
        let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n.div_ceil(PREDICTOR_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut loss = 0.0;
                let mut gw = vec![0.0; v * d];
                let mut gb = vec![0.0; v];
                for i in c * PREDICTOR_CHUNK..((c + 1) * PREDICTOR_CHUNK).min(n) {
                    let h = store.key_f64(i);
                    let p = model.predict(&h).expect("dims checked");
                    let gold = store.token(i) as usize;
                    loss -= p.probs[gold].max(f64::MIN_POSITIVE).ln();
                    for (t, &pt) in p.probs.iter().enumerate() {
                        let g = pt - if t == gold { 1.0 } else { 0.0 };
                        gb[t] += g;
                        gw[t * d..(t + 1) * d]
                            .iter_mut()
                            .zip(&h)
                            .for_each(|(w, x)| *w += g * x);
                    }
                }
                (loss, gw, gb)
            })
            .collect();
        let mut loss = 0.0;
        let mut gw = vec![0.0; v * d];
        let mut gb = vec![0.0; v];
        for (l, w, b) in partials {
            loss += l;
            gw.iter_mut().zip(&w).for_each(|(a, x)| *a += x);
            gb.iter_mut().zip(&b).for_each(|(a, x)| *a += x);
        }
        losses.push(loss / n as f64);
        let step = lr / n as f64;
        model
            .weights
            .iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= step * g);
        model
            .bias
            .iter_mut()
            .zip(&gb)
            .for_each(|(b, g)| *b -= step * g);
    }
    Ok((model, losses))
}

/// Adapter output space followed by PCA + normalization, fitted on `store`.
pub fn fit_retrieval_space(
    store: &Datastore,
    adapter: &AdapterParams,
    pca_dim: usize,
) -> Result<(PcaModel, Datastore)> {
    let z = store.transform(adapter)?;
    let pca = PcaModel::fit_datastore(&z, pca_dim)?;
    let g = pca.transform_datastore(&z)?;
    Ok((pca, g))
}

/// Maps raw vectors into retrieval space: optional adapter, then optional
/// PCA + normalization.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetrievalSpace<'a> {
    pub adapter: Option<&'a AdapterParams>,
    pub pca: Option<&'a PcaModel>,
}

impl RetrievalSpace<'_> {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut width = dim;
        if let Some(a) = self.adapter {
            if a.input_dim() != width {
                return Err(Error::DimensionMismatch {
                    expected: a.input_dim(),
                    found: width,
                });
            }
            width = a.output_dim();
        }
        if let Some(p) = self.pca {
            if p.input_dim() != width {
                return Err(Error::DimensionMismatch {
                    expected: p.input_dim(),
                    found: width,
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        let z = match self.adapter {
            Some(a) => a.forward(h)?,
            None => h.to_vec(),
        };
        match self.pca {
            Some(p) => p.project_normalize(&z),
            None => Ok(z),
        }
    }

    pub fn method(&self) -> &'static str {
        if self.adapter.is_some() {
            "clknn"
        } else {
            "knn-mt"
        }
    }
}

/// Per-query model distributions and neighbor lists, computed once so that
/// many interpolation settings can be scored cheaply.
pub struct PreparedEval {
    vocab_size: usize,
    gold: Vec<u32>,
    pc: Vec<TokenDistribution>,
    /// `None` when the query's projection was degenerate.
    neighbors: Vec<Option<NeighborList>>,
    metric: Metric,
    method: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub lambda_mode: String,
    pub acc_pc: f64,
    pub acc_pr: f64,
    pub acc_pknn: f64,
    pub curve: AccuracyCurve,
}

impl EvalReport {
    pub const SUMMARY_HEADER: &'static str = "method,acc_pc,acc_pr,acc_pknn,lambda_mode";

    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.acc_pc, self.acc_pr, self.acc_pknn, self.lambda_mode
        )
    }
}

pub fn write_summary_csv<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", EvalReport::SUMMARY_HEADER)?;
    for r in reports {
        writeln!(out, "{}", r.summary_row())?;
    }
    Ok(())
}

impl PreparedEval {
    /// `heldout` and `store` are raw (input-space) datastores; `k_max` bounds
    /// every later `k`.
    pub fn new(
        heldout: &Datastore,
        store: &Datastore,
        predictor: &ToyPredictor,
        space: RetrievalSpace<'_>,
        metric: Metric,
        k_max: usize,
    ) -> Result<Self> {
        if heldout.dim() != store.dim() {
            return Err(Error::DimensionMismatch {
                expected: store.dim(),
                found: heldout.dim(),
            });
        }
        if predictor.dim() != store.dim() {
            return Err(Error::DimensionMismatch {
                expected: store.dim(),
                found: predictor.dim(),
            });
        }
        if predictor.vocab_size() != store.vocab_size() as usize
            || heldout.vocab_size() != store.vocab_size()
        {
            return Err(Error::InvalidConfig("vocabulary sizes differ".into()));
        }
        space.validate(store.dim())?;
        if store.is_empty() || heldout.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        let width = space
            .pca
            .map(|p| p.output_dim())
            .or(space.adapter.map(|a| a.output_dim()))
            .unwrap_or(store.dim());
        let retrieval_store = store.map_keys(width, |h| space.apply(h))?;
        let index = FlatIndex::new(&retrieval_store, metric);
        let rows: Vec<(TokenDistribution, Option<NeighborList>)> = (0..heldout.len())
            .into_par_iter()
            .map(|i| {
                let h = heldout.key_f64(i);
                let pc = predictor.predict(&h)?;
                let nb = match space.apply(&h).and_then(|q| index.search(&q, k_max)) {
                    Ok(nb) => Some(nb),
                    Err(Error::DegenerateProjection) | Err(Error::DegenerateVector) => None,
                    Err(e) => return Err(e),
                };
                Ok((pc, nb))
            })
            .collect::<Result<_>>()?;
        let (pc, neighbors) = rows.into_iter().unzip();
        Ok(Self {
            vocab_size: store.vocab_size() as usize,
            gold: heldout.tokens().to_vec(),
            pc,
            neighbors,
            metric,
            method: space.method(),
        })
    }

    pub fn acc_pc(&self) -> f64 {
        let hits = self
            .pc
            .iter()
            .zip(&self.gold)
            .filter(|(p, &g)| p.argmax() == g)
            .count();
        hits as f64 / self.gold.len() as f64
    }

    fn retrieval(&self, nb: &NeighborList, temperature: f64) -> Result<TokenDistribution> {
        match self.metric {
            Metric::L2 => Ok(retrieval_distribution_l2(nb, temperature, self.vocab_size)),
            Metric::InnerProduct => retrieval_distribution_ip(nb, temperature, self.vocab_size),
        }
    }

    /// `(acc_pr, acc_pknn)` under `rcfg`. Degenerate queries fall back to
    /// `p_c` and count as retrieval misses.
    pub fn scores(&self, rcfg: &RetrievalConfig) -> Result<(f64, f64)> {
        rcfg.validate()?;
        if rcfg.metric != self.metric {
            return Err(Error::InvalidConfig(
                "retrieval metric differs from the prepared index".into(),
            ));
        }
        let mut pr_hits = 0usize;
        let mut knn_hits = 0usize;
        for ((pc, nb), &gold) in self.pc.iter().zip(&self.neighbors).zip(&self.gold) {
            let Some(nb) = nb else {
                knn_hits += (pc.argmax() == gold) as usize;
                continue;
            };
            let nb = nb.truncated(rcfg.k);
            let pr = self.retrieval(&nb, rcfg.temperature)?;
            let lambda = if rcfg.adaptive_lambda {
                adaptive_lambda(&nb, rcfg.lambda)
            } else {
                rcfg.lambda
            };
            let pknn = interpolate(pc, &pr, lambda)?;
            pr_hits += (pr.argmax() == gold) as usize;
            knn_hits += (pknn.argmax() == gold) as usize;
        }
        let n = self.gold.len() as f64;
        Ok((pr_hits as f64 / n, knn_hits as f64 / n))
    }

    pub fn curve(&self, ks: &[usize]) -> AccuracyCurve {
        let n = self.gold.len() as f64;
        let accuracies = ks
            .iter()
            .map(|&k| {
                self.neighbors
                    .iter()
                    .zip(&self.gold)
                    .filter_map(|(nb, &g)| nb.as_ref().map(|nb| correct_fraction(nb, g, k)))
                    .sum::<f64>()
                    / n
            })
            .collect();
        AccuracyCurve {
            ks: ks.to_vec(),
            accuracies,
        }
    }

    pub fn report(&self, rcfg: &RetrievalConfig, ks: &[usize]) -> Result<EvalReport> {
        let (acc_pr, acc_pknn) = self.scores(rcfg)?;
        Ok(EvalReport {
            method: self.method.to_string(),
            lambda_mode: if rcfg.adaptive_lambda {
                "adaptive"
            } else {
                "fixed"
            }
            .to_string(),
            acc_pc: self.acc_pc(),
            acc_pr,
            acc_pknn,
            curve: self.curve(ks),
        })
    }
}

/// Next-token accuracy of `p_c`, `p_r` and `p_knn` plus the retrieval
/// accuracy curve over `ks`.
pub fn evaluate_pipeline(
    heldout: &Datastore,
    store: &Datastore,
    predictor: &ToyPredictor,
    space: RetrievalSpace<'_>,
    rcfg: &RetrievalConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    rcfg.validate()?;
    let k_max = ks.iter().copied().chain([rcfg.k]).max().unwrap_or(rcfg.k);
    PreparedEval::new(heldout, store, predictor, space, rcfg.metric, k_max)?.report(rcfg, ks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub positives: usize,
    pub negatives: usize,
    pub curve: AccuracyCurve,
}

/// Trains one adapter per `(M, N)` pair and measures the retrieval
/// accuracy curve of `heldout` against `train` in the PCA-normalized space.
pub fn run_ablation(
    train: &Datastore,
    heldout: &Datastore,
    base: &TrainConfig,
    grid: &[(usize, usize)],
    pca_dim: usize,
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&(m, n)| {
            let cfg = TrainConfig {
                positives: m,
                negatives: n,
                cluster_pool: base.cluster_pool.max(n),
                ..base.clone()
            };
            let adapter = train_adapter(train, &cfg)?.params;
            let (pca, store) = fit_retrieval_space(train, &adapter, pca_dim)?;
            let queries = heldout.map_keys(pca.output_dim(), |h| {
                pca.project_normalize(&adapter.forward(h)?)
            })?;
            Ok(AblationRow {
                positives: m,
                negatives: n,
                curve: accuracy_curve(&queries, &store, ks, Metric::InnerProduct)?,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "M,N,k,accuracy")?;
    for r in rows {
        for (k, a) in r.curve.ks.iter().zip(&r.curve.accuracies) {
            writeln!(out, "{},{},{k},{a}", r.positives, r.negatives)?;
        }
    }
    Ok(())
}

/// Two leading PCA coordinates of every entry, for external plotting.
pub fn write_pca_2d_csv<W: Write>(ds: &Datastore, mut out: W) -> Result<()> {
    let pca = PcaModel::fit_datastore(ds, 2.min(ds.dim()))?;
    writeln!(out, "token,x,y")?;
    for i in 0..ds.len() {
        let p = pca.project(&ds.key_f64(i))?;
        writeln!(
            out,
            "{},{},{}",
            ds.token(i),
            p[0],
            p.get(1).copied().unwrap_or(0.0)
        )?;
    }
    Ok(())
}

/// Convenience for building a datastore from `(vector, token)` pairs.
pub fn store_from_pairs(pairs: &[(Vec<f64>, u32)], vocab_size: u32) -> Result<Datastore> {
    let dim = pairs.first().map(|p| p.0.len()).unwrap_or(1);
    Datastore::build(
        pairs
            .iter()
            .map(|(k, t)| Entry::new(k.iter().map(|&v| v as f32).collect(), *t))
            .collect(),
        dim,
        vocab_size,
    )
}

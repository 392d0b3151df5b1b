//! Feedforward retrieval adapter and its supervised contrastive training.
//!
//! The adapter maps a context vector `h` to a retrieval vector
//! `z = ReLU(h·W1 + b1)·W2 + b2`. It is trained so that vectors sharing a
//! token label score high under temperature-scaled cosine similarity and
//! vectors of other tokens (mined from nearby cluster centers) score low.
//!
//! Gradients are derived by hand; all math is `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datastore::{ClusterIndex, Datastore};
use crate::error::{Error, Result};
use crate::io::{dim_u32, put_f64s, put_u32, Reader};
use crate::rng::{stage_rng, Stage};
use crate::sampler::{self, CenterMetric, SampleSet, SamplerConfig};

pub const ADAPTER_MAGIC: [u8; 4] = *b"CLKA";
pub const ADAPTER_VERSION: u32 = 1;

/// `W1: d×d_f`, `b1: d_f`, `W2: d_f×d_o`, `b2: d_o`, all row-major.
///
/// The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Hidden pre-activations and output of one forward pass.
struct Trace {
    pre: Vec<f64>,
    z: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * output_dim],
            b2: vec![0.0; output_dim],
        }
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidConfig(
                "adapter widths must be positive".into(),
            ));
        }
        let check = |expected: usize, v: &[f64]| {
            if v.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index: 0 });
            }
            Ok(())
        };
        check(input_dim * hidden_dim, &w1)?;
        check(hidden_dim, &b1)?;
        check(hidden_dim * output_dim, &w2)?;
        check(output_dim, &b2)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim, output_dim);
        let a1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let a2 = (6.0 / (hidden_dim + output_dim) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim, self.output_dim)
    }

    /// Parameter tensors in file order: W1, b1, W2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: h.len(),
            });
        }
        Ok(self.trace(h).z)
    }

    fn trace(&self, h: &[f64]) -> Trace {
        let hd = self.hidden_dim;
        let mut pre = self.b1.clone();
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let row = &self.w1[i * hd..(i + 1) * hd];
            pre.iter_mut().zip(row).for_each(|(p, w)| *p += hi * w);
        }
        let od = self.output_dim;
        let mut z = self.b2.clone();
        for (j, &pj) in pre.iter().enumerate() {
            if pj <= 0.0 {
                continue;
            }
            let row = &self.w2[j * od..(j + 1) * od];
            z.iter_mut().zip(row).for_each(|(o, w)| *o += pj * w);
        }
        Trace { pre, z }
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dz` for input `h`.
    /// ReLU derivative at exactly zero is taken as 0.
    fn backward(&self, h: &[f64], trace: &Trace, dz: &[f64], grad: &mut Self) {
        let (hd, od) = (self.hidden_dim, self.output_dim);
        grad.b2.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
        let mut dpre = vec![0.0; hd];
        for j in 0..hd {
            let pj = trace.pre[j];
            if pj <= 0.0 {
                continue;
            }
            let w_row = &self.w2[j * od..(j + 1) * od];
            let g_row = &mut grad.w2[j * od..(j + 1) * od];
            let mut da = 0.0;
            for k in 0..od {
                g_row[k] += pj * dz[k];
                da += w_row[k] * dz[k];
            }
            dpre[j] = da;
        }
        grad.b1.iter_mut().zip(&dpre).for_each(|(g, d)| *g += d);
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let g_row = &mut grad.w1[i * hd..(i + 1) * hd];
            g_row.iter_mut().zip(&dpre).for_each(|(g, d)| *g += hi * d);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + 8 * self.num_params());
        out.extend_from_slice(&ADAPTER_MAGIC);
        put_u32(&mut out, ADAPTER_VERSION);
        put_u32(&mut out, dim_u32(self.input_dim)?);
        put_u32(&mut out, dim_u32(self.hidden_dim)?);
        put_u32(&mut out, dim_u32(self.output_dim)?);
        for t in self.tensors() {
            put_f64s(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ADAPTER_MAGIC)?;
        r.version(ADAPTER_VERSION)?;
        let d = r.u32()? as usize;
        let df = r.u32()? as usize;
        let dout = r.u32()? as usize;
        r.require(8 * (d * df + df + df * dout + dout) as u64)?;
        let w1 = r.f64s(d * df)?;
        let b1 = r.f64s(df)?;
        let w2 = r.f64s(df * dout)?;
        let b2 = r.f64s(dout)?;
        Self::from_parts(d, df, dout, w1, b1, w2, b2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `z = ReLU(h·W1 + b1)·W2 + b2`.
pub fn ffn_forward(h: &[f64], params: &AdapterParams) -> Result<Vec<f64>> {
    params.forward(h)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity divided by `temperature`.
pub fn cosine_score(a: &[f64], b: &[f64], temperature: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos / temperature)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Multi-positive contrastive loss
/// `-log(Σ⁺ e^s / (Σ⁺ e^s + Σ⁻ e^s))` with `s` = [`cosine_score`].
pub fn contrastive_loss<P, N>(
    anchor: &[f64],
    positives: &[P],
    negatives: &[N],
    temperature: f64,
) -> Result<f64>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidConfig(
            "contrastive loss needs M >= 1 and N >= 1".into(),
        ));
    }
    let pos = positives
        .iter()
        .map(|p| cosine_score(anchor, p.as_ref(), temperature))
        .collect::<Result<Vec<_>>>()?;
    let mut all = pos.clone();
    for n in negatives {
        all.push(cosine_score(anchor, n.as_ref(), temperature)?);
    }
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// Loss value plus its gradient with respect to every input vector.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Returns `(cos, dcos/da, dcos/db)`.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let cos = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - cos * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - cos * y / (nb * nb))
        .collect();
    Ok((cos, ga, gb))
}

/// [`contrastive_loss`] with gradients with respect to the anchor, each
/// positive and each negative.
pub fn contrastive_loss_grad<P, N>(
    anchor: &[f64],
    positives: &[P],
    negatives: &[N],
    temperature: f64,
) -> Result<LossGrad>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidConfig(
            "contrastive loss needs M >= 1 and N >= 1".into(),
        ));
    }
    let m = positives.len();
    let others = positives
        .iter()
        .map(|p| p.as_ref())
        .chain(negatives.iter().map(|n| n.as_ref()));
    let mut scores = Vec::with_capacity(m + negatives.len());
    let mut d_anchor_cos = Vec::with_capacity(scores.capacity());
    let mut d_other_cos = Vec::with_capacity(scores.capacity());
    for other in others {
        if other.len() != anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                found: other.len(),
            });
        }
        let (cos, ga, gb) = cosine_with_grad(anchor, other)?;
        scores.push(cos / temperature);
        d_anchor_cos.push(ga);
        d_other_cos.push(gb);
    }
    let lse_all = log_sum_exp(&scores);
    let lse_pos = log_sum_exp(&scores[..m]);
    let loss = lse_all - lse_pos;

    // dL/ds_i = softmax_all_i - [i positive] softmax_pos_i
    let mut anchor_grad = vec![0.0; anchor.len()];
    let mut grads = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        let mut ds = (s - lse_all).exp();
        if i < m {
            ds -= (s - lse_pos).exp();
        }
        let dcos = ds / temperature;
        anchor_grad
            .iter_mut()
            .zip(&d_anchor_cos[i])
            .for_each(|(g, d)| *g += dcos * d);
        grads.push(d_other_cos[i].iter().map(|d| dcos * d).collect::<Vec<_>>());
    }
    let negatives_grad = grads.split_off(m);
    Ok(LossGrad {
        loss,
        anchor: anchor_grad,
        positives: grads,
        negatives: negatives_grad,
    })
}

/// Loss of one anchor's sample set and its exact gradient with respect to all
/// adapter parameters. Anchor, positives and negatives all pass through the
/// shared adapter; with `stop_gradient` only the anchor path is differentiated.
pub fn loss_gradients<P, N>(
    h_anchor: &[f64],
    h_positives: &[P],
    h_negatives: &[N],
    params: &AdapterParams,
    temperature: f64,
    stop_gradient: bool,
) -> Result<(f64, AdapterParams)>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    let d = params.input_dim();
    let inputs: Vec<&[f64]> = std::iter::once(h_anchor)
        .chain(h_positives.iter().map(|p| p.as_ref()))
        .chain(h_negatives.iter().map(|n| n.as_ref()))
        .collect();
    if let Some(bad) = inputs.iter().find(|h| h.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let traces: Vec<Trace> = inputs.iter().map(|h| params.trace(h)).collect();
    let m = h_positives.len();
    let lg = contrastive_loss_grad(
        &traces[0].z,
        &traces[1..1 + m]
            .iter()
            .map(|t| t.z.as_slice())
            .collect::<Vec<_>>(),
        &traces[1 + m..]
            .iter()
            .map(|t| t.z.as_slice())
            .collect::<Vec<_>>(),
        temperature,
    )?;
    let mut grad = params.zeros_like();
    params.backward(inputs[0], &traces[0], &lg.anchor, &mut grad);
    if !stop_gradient {
        for (i, dz) in lg.positives.iter().chain(&lg.negatives).enumerate() {
            params.backward(inputs[i + 1], &traces[i + 1], dz, &mut grad);
        }
    }
    Ok((lg.loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: AdapterParams,
    v: AdapterParams,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, like: &AdapterParams) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    fn apply(&mut self, params: &mut AdapterParams, grad: &AdapterParams) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
                    p.iter_mut().zip(g).for_each(|(x, d)| *x -= self.lr * d);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let ps = params.tensors_mut();
                let ms = self.m.tensors_mut();
                let vs = self.v.tensors_mut();
                for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grad.tensors()) {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Positives per anchor (M).
    pub positives: usize,
    /// Negatives per anchor (N).
    pub negatives: usize,
    /// Nearest-center pool negatives are drawn from (K ≥ N).
    pub cluster_pool: usize,
    /// Training temperature T′.
    pub temperature: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Recompute cluster centers in adapter output space every this many
    /// steps. `None` mines once in input space and never refreshes.
    pub refresh_interval: Option<usize>,
    pub seed: u64,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub optimizer: Optimizer,
    pub stop_gradient: bool,
    pub center_metric: CenterMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            positives: 2,
            negatives: 32,
            cluster_pool: 128,
            temperature: 0.01,
            batch_size: 32,
            steps: 2000,
            learning_rate: 1e-3,
            refresh_interval: Some(1000),
            seed: 0,
            hidden_dim: 64,
            output_dim: 32,
            optimizer: Optimizer::default(),
            stop_gradient: false,
            center_metric: CenterMetric::Cosine,
        }
    }
}

impl TrainConfig {
    /// Full-size settings (d_f = 4096, d_o = 512, 500k steps).
    pub fn full_scale() -> Self {
        Self {
            hidden_dim: 4096,
            output_dim: 512,
            steps: 500_000,
            ..Self::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            positives: self.positives,
            negatives: self.negatives,
            cluster_pool: self.cluster_pool,
            metric: self.center_metric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("T_prime must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig(
                "adapter widths must be positive".into(),
            ));
        }
        if self.refresh_interval == Some(0) {
            return Err(Error::InvalidConfig(
                "refresh_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: AdapterParams,
    pub log: Vec<LossReport>,
    /// Anchors dropped because a vector collapsed to zero norm.
    pub skipped_anchors: usize,
}

impl TrainOutput {
    pub fn write_log_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss,grad_norm")?;
        for r in &self.log {
            writeln!(out, "{},{},{}", r.step, r.loss, r.grad_norm)?;
        }
        Ok(())
    }
}

/// Trains an adapter from the standard initialization.
pub fn train_adapter(ds: &Datastore, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut init_rng = stage_rng(cfg.seed, Stage::AdapterInit);
    let params = AdapterParams::init(ds.dim(), cfg.hidden_dim, cfg.output_dim, &mut init_rng);
    train_adapter_from(ds, cfg, params)
}

/// Trains starting from `params`. Anchors are drawn uniformly from entries
/// whose cluster has at least two members; the batch loss is the mean of
/// the per-anchor losses.
pub fn train_adapter_from(
    ds: &Datastore,
    cfg: &TrainConfig,
    mut params: AdapterParams,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: ds.dim(),
        });
    }
    if cfg.steps == 0 {
        return Ok(TrainOutput {
            params,
            log: Vec::new(),
            skipped_anchors: 0,
        });
    }
    let base = ClusterIndex::partition(ds)?;
    let eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| base.members(ds.token(i)).len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InvalidConfig(
            "no anchor has a same-token partner".into(),
        ));
    }
    let available = base.nonempty_tokens().len() - 1;
    if available < cfg.negatives {
        return Err(Error::InsufficientClusters {
            available,
            required: cfg.negatives,
        });
    }

    let scfg = cfg.sampler();
    let mut rng = stage_rng(cfg.seed, Stage::AdapterSampling);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut mining = base.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut skipped = 0usize;

    for step in 0..cfg.steps {
        if let Some(interval) = cfg.refresh_interval {
            if step % interval == 0 {
                let z = transformed_keys(ds, &params);
                mining = base.with_centers_from(params.output_dim(), &z);
            }
        }
        let batch = draw_batch(ds, &eligible, &mining, &params, &scfg, cfg, &mut rng)?;

        let results: Vec<Result<(f64, AdapterParams)>> = batch
            .par_iter()
            .map(|s| {
                let h = ds.key_f64(s.anchor);
                let pos: Vec<Vec<f64>> = s.positives.iter().map(|&i| ds.key_f64(i)).collect();
                let neg: Vec<Vec<f64>> = s.negatives.iter().map(|&i| ds.key_f64(i)).collect();
                loss_gradients(&h, &pos, &neg, &params, cfg.temperature, cfg.stop_gradient)
            })
            .collect();

        let mut total = params.zeros_like();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for r in results {
            match r {
                Ok((loss, g)) => {
                    loss_sum += loss;
                    total.add_assign(&g);
                    used += 1;
                }
                Err(Error::DegenerateVector) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::DegenerateVector);
        }
        total.scale(1.0 / used as f64);
        let grad_norm = total.norm();
        opt.apply(&mut params, &total);
        log.push(LossReport {
            step,
            loss: loss_sum / used as f64,
            grad_norm,
        });
    }
    Ok(TrainOutput {
        params,
        log,
        skipped_anchors: skipped,
    })
}

fn transformed_keys(ds: &Datastore, params: &AdapterParams) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|i| params.trace(&ds.key_f64(i)).z)
        .collect();
    rows.concat()
}

fn draw_batch(
    ds: &Datastore,
    eligible: &[usize],
    mining: &ClusterIndex,
    params: &AdapterParams,
    scfg: &SamplerConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleSet>> {
    let z_space = cfg.refresh_interval.is_some();
    (0..cfg.batch_size)
        .map(|_| {
            let anchor = eligible[rng.random_range(0..eligible.len())];
            let h = ds.key_f64(anchor);
            let query = if z_space { params.trace(&h).z } else { h };
            sampler::sample_set(anchor, &query, mining, scfg, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Entry;
    use rand::SeedableRng;

    fn random_params(d: usize, df: usize, dout: usize, seed: u64) -> AdapterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AdapterParams::init(d, df, dout, &mut rng);
        p.b1.iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
        p.b2.iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
        p
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dead_hidden_layer_outputs_bias() {
        let mut p = AdapterParams::zeros(3, 4, 2);
        p.w2.iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = i as f64 - 3.0);
        p.b2 = vec![1.0, 2.0];
        assert_eq!(p.forward(&[5.0, -2.0, 0.3]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_gating() {
        let p = AdapterParams::from_parts(
            2,
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(p.forward(&[3.0, -4.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_matvec() {
        let p = random_params(4, 8, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_vec(&mut rng, 4);
        // Oracle: explicit two-loop products.
        let mut hidden = [0.0; 8];
        for j in 0..8 {
            let mut s = p.b1[j];
            for i in 0..4 {
                s += h[i] * p.w1[i * 8 + j];
            }
            hidden[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = [0.0; 3];
        for k in 0..3 {
            let mut s = p.b2[k];
            for j in 0..8 {
                s += hidden[j] * p.w2[j * 3 + k];
            }
            z[k] = s;
        }
        let got = p.forward(&h).unwrap();
        for k in 0..3 {
            assert!((got[k] - z[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_width_mismatch() {
        let p = AdapterParams::zeros(3, 2, 2);
        assert!(matches!(
            p.forward(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 1
            })
        ));
    }

    #[test]
    fn cosine_score_examples() {
        assert_eq!(cosine_score(&[2.0, 0.0], &[2.0, 0.0], 0.01).unwrap(), 100.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0], 0.3).unwrap(), 0.0);
        let s = cosine_score(&[1.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((s - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_score(&[0.0, 0.0], &[1.0, 1.0], 1.0),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn loss_symmetric_case_is_ln2() {
        let l = contrastive_loss(&[1.0, 2.0], &[[0.5, -1.0]], &[[0.5, -1.0]], 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_parallel_orthogonal_case() {
        let l = contrastive_loss(&[1.0, 0.0], &[[3.0, 0.0]], &[[0.0, 2.0]], 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn duplicated_positives_resum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_vec(&mut rng, 4);
        let pos: Vec<Vec<f64>> = (0..2).map(|_| random_vec(&mut rng, 4)).collect();
        let neg: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 4)).collect();
        let t = 0.5;
        let a: f64 = pos
            .iter()
            .map(|p| cosine_score(&z, p, t).unwrap().exp())
            .sum();
        let b: f64 = neg
            .iter()
            .map(|n| cosine_score(&z, n, t).unwrap().exp())
            .sum();
        let doubled: Vec<Vec<f64>> = pos.iter().chain(&pos).cloned().collect();
        let l = contrastive_loss(&z, &doubled, &neg, t).unwrap();
        assert!((l + (2.0 * a / (2.0 * a + b)).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_requires_samples() {
        let empty: [[f64; 2]; 0] = [];
        assert!(contrastive_loss(&[1.0, 0.0], &empty, &[[1.0, 0.0]], 1.0).is_err());
        assert!(contrastive_loss(&[1.0, 0.0], &[[1.0, 0.0]], &empty, 1.0).is_err());
    }

    /// Central differences of the loss with respect to every parameter.
    fn finite_difference(
        params: &AdapterParams,
        h: &[f64],
        pos: &[Vec<f64>],
        neg: &[Vec<f64>],
        t: f64,
        eps: f64,
    ) -> AdapterParams {
        let loss = |p: &AdapterParams| {
            let z = p.forward(h).unwrap();
            let zp: Vec<_> = pos.iter().map(|x| p.forward(x).unwrap()).collect();
            let zn: Vec<_> = neg.iter().map(|x| p.forward(x).unwrap()).collect();
            contrastive_loss(&z, &zp, &zn, t).unwrap()
        };
        let mut out = params.zeros_like();
        for ti in 0..4 {
            for i in 0..params.tensors()[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][i] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][i] -= eps;
                out.tensors_mut()[ti][i] = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            }
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_params(3, 4, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_vec(&mut rng, 3);
        let pos: Vec<_> = (0..2).map(|_| random_vec(&mut rng, 3)).collect();
        let neg: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
        let (_, g) = loss_gradients(&h, &pos, &neg, &p, 1.0, false).unwrap();
        let fd = finite_difference(&p, &h, &pos, &neg, 1.0, 1e-6);
        for (a, b) in g.tensors().iter().zip(fd.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!(
                    (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0),
                    "{x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn dead_path_has_zero_gradient() {
        let mut p = random_params(3, 4, 2, 20);
        // Hidden unit 0 never activates.
        for i in 0..3 {
            p.w1[i * 4] = 0.0;
        }
        p.b1[0] = -1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_vec(&mut rng, 3);
        let pos = vec![random_vec(&mut rng, 3)];
        let neg = vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)];
        let (_, g) = loss_gradients(&h, &pos, &neg, &p, 0.1, false).unwrap();
        assert_eq!(g.w2[0], 0.0);
        assert_eq!(g.w2[1], 0.0);
        assert_eq!(g.b1[0], 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut p = random_params(2, 3, 2, 30);
        let h = vec![0.7, -0.2];
        // Force hidden unit 1's pre-activation to exactly zero.
        p.b1[1] = 0.0;
        p.w1[1] = 0.0; // row 0, col 1
        p.w1[3 + 1] = 0.0; // row 1, col 1
        let pos = vec![vec![0.3, 0.9]];
        let neg = vec![vec![-0.5, 0.4]];
        let (_, g) = loss_gradients(&h, &pos, &neg, &p, 1.0, true).unwrap();
        assert_eq!(g.b1[1], 0.0);
        // One-sided difference on the inactive (open) side agrees.
        let loss = |p: &AdapterParams| {
            contrastive_loss(
                &p.forward(&h).unwrap(),
                &[p.forward(&pos[0]).unwrap()],
                &[p.forward(&neg[0]).unwrap()],
                1.0,
            )
            .unwrap()
        };
        let mut minus = p.clone();
        minus.b1[1] -= 1e-6;
        let base = contrastive_loss(
            &p.forward(&h).unwrap(),
            &[p.forward(&pos[0]).unwrap()],
            &[p.forward(&neg[0]).unwrap()],
            1.0,
        )
        .unwrap();
        // Unit 1 sits at exactly zero for every input, so pushing it negative
        // leaves the loss unchanged.
        assert!(((base - loss(&minus)) / 1e-6).abs() < 1e-9);
    }

    #[test]
    fn temperature_rescaling_consistency() {
        let p = random_params(3, 5, 3, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = random_vec(&mut rng, 3);
        let pos: Vec<_> = (0..2).map(|_| random_vec(&mut rng, 3)).collect();
        let neg: Vec<_> = (0..2).map(|_| random_vec(&mut rng, 3)).collect();
        let (l1, g1) = loss_gradients(&h, &pos, &neg, &p, 0.2, false).unwrap();
        let (l2, g2) = loss_gradients(&h, &pos, &neg, &p, 0.4, false).unwrap();
        assert_ne!(l1, l2);
        let fd = finite_difference(&p, &h, &pos, &neg, 0.4, 1e-6);
        for (a, b) in g2.tensors().iter().zip(fd.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0));
            }
        }
        assert_ne!(g1, g2);
    }

    #[test]
    fn stop_gradient_only_uses_anchor_path() {
        let p = random_params(3, 4, 2, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let h = random_vec(&mut rng, 3);
        let pos = vec![random_vec(&mut rng, 3)];
        let neg = vec![random_vec(&mut rng, 3)];
        let (_, full) = loss_gradients(&h, &pos, &neg, &p, 1.0, false).unwrap();
        let (_, anchor_only) = loss_gradients(&h, &pos, &neg, &p, 1.0, true).unwrap();
        assert_ne!(full, anchor_only);
        // FD where positives/negatives are frozen outputs.
        let zp = vec![p.forward(&pos[0]).unwrap()];
        let zn = vec![p.forward(&neg[0]).unwrap()];
        let eps = 1e-6;
        for i in 0..p.b2.len() {
            let mut a = p.clone();
            a.b2[i] += eps;
            let mut b = p.clone();
            b.b2[i] -= eps;
            let fd = (contrastive_loss(&a.forward(&h).unwrap(), &zp, &zn, 1.0).unwrap()
                - contrastive_loss(&b.forward(&h).unwrap(), &zp, &zn, 1.0).unwrap())
                / (2.0 * eps);
            assert!((fd - anchor_only.b2[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn params_file_round_trip_and_errors() {
        let p = random_params(3, 5, 2, 60);
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLKA");
        assert_eq!(bytes.len(), 20 + 8 * (15 + 5 + 10 + 2));
        assert_eq!(AdapterParams::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(
            AdapterParams::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            AdapterParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    fn two_cluster_store() -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let entries = (0..200)
            .map(|i| {
                let t = (i % 2) as u32;
                let c = if t == 0 { (1.0, 0.2) } else { (0.2, 1.0) };
                let key = vec![
                    (c.0 + rng.random_range(-0.6..0.6)) as f32,
                    (c.1 + rng.random_range(-0.6..0.6)) as f32,
                ];
                Entry::new(key, t)
            })
            .collect();
        Datastore::build(entries, 2, 2).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            positives: 1,
            negatives: 1,
            cluster_pool: 1,
            temperature: 0.5,
            batch_size: 16,
            steps: 500,
            learning_rate: 1e-2,
            refresh_interval: Some(100),
            seed: 1,
            hidden_dim: 8,
            output_dim: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let ds = two_cluster_store();
        let cfg = TrainConfig {
            steps: 0,
            ..small_cfg()
        };
        let mut rng = stage_rng(cfg.seed, Stage::AdapterInit);
        let init = AdapterParams::init(2, 8, 2, &mut rng);
        let out = train_adapter(&ds, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = two_cluster_store();
        let cfg = TrainConfig {
            steps: 50,
            ..small_cfg()
        };
        let a = train_adapter(&ds, &cfg).unwrap();
        let b = train_adapter(&ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_reduces_loss_on_two_clusters() {
        let ds = two_cluster_store();
        let out = train_adapter(&ds, &small_cfg()).unwrap();
        assert_eq!(out.log.len(), 500);
        let head: f64 = out.log[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let tail: f64 = out.log[450..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        assert!(tail < head, "{tail} !< {head}");
        assert!(out.log.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn sgd_variant_and_input_space_mining_run() {
        let ds = two_cluster_store();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            refresh_interval: None,
            steps: 20,
            ..small_cfg()
        };
        let out = train_adapter(&ds, &cfg).unwrap();
        assert_eq!(out.log.len(), 20);
    }

    #[test]
    fn training_needs_enough_clusters() {
        let ds = two_cluster_store();
        let cfg = TrainConfig {
            negatives: 2,
            cluster_pool: 2,
            ..small_cfg()
        };
        assert!(matches!(
            train_adapter(&ds, &cfg),
            Err(Error::InsufficientClusters {
                available: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn log_csv_format() {
        let out = TrainOutput {
            params: AdapterParams::zeros(1, 1, 1),
            log: vec![LossReport {
                step: 0,
                loss: 0.5,
                grad_norm: 2.0,
            }],
            skipped_anchors: 0,
        };
        let mut buf = Vec::new();
        out.write_log_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss,grad_norm\n0,0.5,2\n"
        );
    }
}

use std::path::{Path, PathBuf};

use clknn::{
    CenterMetric, Error, Metric, Optimizer, Result, RetrievalConfig, SynthConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

/// Every knob of the pipeline in one flat JSON object. Unknown keys are
/// rejected so a typo in a grid file fails loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,

    pub vocab_size: u32,
    pub dim: usize,
    pub zipf_exponent: f64,
    pub cluster_spread: f64,
    pub center_scale: f64,
    pub center_rank: Option<usize>,
    pub train_count: usize,
    pub heldout_count: usize,
    pub general_count: usize,
    pub domain_shift: f64,

    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k_pool: usize,
    #[serde(rename = "T_prime")]
    pub t_prime: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub refresh_interval: Option<usize>,
    pub d_f: usize,
    pub d_o: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub stop_gradient: bool,
    /// `cosine` or `l2`.
    pub center_metric: String,

    pub pca_dim: usize,

    pub k: usize,
    #[serde(rename = "T")]
    pub t: f64,
    pub lambda: f64,
    /// `l2` or `ip`.
    pub metric: String,
    pub use_adaptive_lambda: bool,

    /// k values of the retrieval accuracy curve.
    pub ks: Vec<usize>,
    pub predictor_epochs: usize,
    pub predictor_lr: f64,
    /// `(M, N)` pairs for `ablate`.
    pub grid: Vec<(usize, usize)>,

    pub train_path: Option<PathBuf>,
    pub heldout_path: Option<PathBuf>,
    pub general_path: Option<PathBuf>,
    pub adapter_path: Option<PathBuf>,
    pub pca_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        let r = RetrievalConfig::default();
        Self {
            seed: 0,
            vocab_size: s.vocab_size,
            dim: s.dim,
            zipf_exponent: s.zipf_exponent,
            cluster_spread: s.cluster_spread,
            center_scale: s.center_scale,
            center_rank: Some(8),
            train_count: s.train_count,
            heldout_count: s.heldout_count,
            general_count: s.general_count,
            domain_shift: s.domain_shift,
            m: t.positives,
            n: 8,
            k_pool: 16,
            t_prime: t.temperature,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            refresh_interval: t.refresh_interval,
            d_f: t.hidden_dim,
            d_o: t.output_dim,
            optimizer: "adam".into(),
            stop_gradient: t.stop_gradient,
            center_metric: "cosine".into(),
            pca_dim: 16,
            k: r.k,
            t: r.temperature,
            lambda: r.lambda,
            metric: r.metric.to_string(),
            use_adaptive_lambda: r.adaptive_lambda,
            ks: vec![1, 2, 4, 8, 16],
            predictor_epochs: 200,
            predictor_lr: 0.5,
            grid: vec![(1, 1), (1, 32), (2, 1), (2, 8), (2, 32)],
            train_path: None,
            heldout_path: None,
            general_path: None,
            adapter_path: None,
            pca_path: None,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            vocab_size: self.vocab_size,
            dim: self.dim,
            zipf_exponent: self.zipf_exponent,
            cluster_spread: self.cluster_spread,
            center_scale: self.center_scale,
            center_rank: self.center_rank,
            train_count: self.train_count,
            heldout_count: self.heldout_count,
            general_count: self.general_count,
            domain_shift: self.domain_shift,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "adam" => Optimizer::default(),
            "sgd" => Optimizer::Sgd,
            other => return Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        };
        let center_metric = match self.center_metric.as_str() {
            "cosine" => CenterMetric::Cosine,
            "l2" => CenterMetric::L2,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown center_metric {other:?}"
                )))
            }
        };
        let cfg = TrainConfig {
            positives: self.m,
            negatives: self.n,
            cluster_pool: self.k_pool,
            temperature: self.t_prime,
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            refresh_interval: self.refresh_interval,
            seed: self.seed,
            hidden_dim: self.d_f,
            output_dim: self.d_o,
            optimizer,
            stop_gradient: self.stop_gradient,
            center_metric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn retrieval(&self) -> Result<RetrievalConfig> {
        let cfg = RetrievalConfig {
            k: self.k,
            temperature: self.t,
            lambda: self.lambda,
            metric: self.metric.parse()?,
            adaptive_lambda: self.use_adaptive_lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metric(&self) -> Result<Metric> {
        self.metric.parse()
    }

    pub fn validate_eval(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig(
                "ks must be a nonempty list of positive k".into(),
            ));
        }
        if self.pca_dim == 0 {
            return Err(Error::InvalidConfig("pca_dim must be at least 1".into()));
        }
        if self.predictor_lr.is_nan() || self.predictor_lr <= 0.0 {
            return Err(Error::InvalidConfig("predictor_lr must be positive".into()));
        }
        Ok(())
    }
}

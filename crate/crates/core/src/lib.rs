//! Contrastive retrieval representations for kNN token scoring.
//!
//! The crate learns a dedicated retrieval space from word-labeled context
//! vectors and uses it for interpolated nearest-neighbor token prediction:
//!
//! 1. [`datastore`] holds `(key, token)` pairs and the per-token clusters.
//! 2. [`sampler`] draws same-token positives and cluster-center hard negatives.
//! 3. [`adapter`] is the feedforward adapter, its contrastive objective, analytic
//!    gradients and the training loop.
//! 4. [`projection`] fits PCA over adapter outputs and normalizes projections.
//! 5. [`retrieval`] runs exact kNN search and builds retrieval / interpolated
//!    token distributions.
//! 6. [`synth`] generates synthetic datastores and evaluates the whole pipeline.

// Dense numeric kernels index several arrays per loop, and the negated
// float comparisons are how NaN gets rejected.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod datastore;
pub mod error;
mod io;
pub mod projection;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use adapter::{AdapterParams, LossReport, Optimizer, TrainConfig, TrainOutput};
pub use datastore::{ClusterIndex, Datastore, Entry};
pub use error::{Error, Result};
pub use projection::PcaModel;
pub use retrieval::{Metric, NeighborList, RetrievalConfig, TokenDistribution};
pub use sampler::{CenterMetric, SampleSet, SamplerConfig};
pub use synth::{AccuracyCurve, SynthConfig, ToyPredictor};

//! Word-labeled context vectors and their per-token clusters.
//!
//! A [`Datastore`] is an ordered list of `(key, token)` pairs. Keys are stored
//! as `f32` (the on-disk precision); everything computed from them is `f64`.
//! Entry order is the identity used for tie-breaking everywhere downstream.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::io::{dim_u32, put_u32, put_u64, Reader};

pub const DATASTORE_MAGIC: [u8; 4] = *b"CLKN";
pub const DATASTORE_VERSION: u32 = 1;
/// magic + version + count + dim + vocab_size.
pub const DATASTORE_HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 4;

/// One `(key, token)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: Vec<f32>,
    pub token: u32,
}

impl Entry {
    pub fn new(key: Vec<f32>, token: u32) -> Self {
        Self { key, token }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    vocab_size: u32,
    keys: Vec<f32>,
    tokens: Vec<u32>,
}

impl Datastore {
    /// Builds a datastore from pairs, keeping input order.
    pub fn build(entries: Vec<Entry>, dim: usize, vocab_size: u32) -> Result<Self> {
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut tokens = Vec::with_capacity(entries.len());
        for e in entries {
            if e.key.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.key.len(),
                });
            }
            keys.extend_from_slice(&e.key);
            tokens.push(e.token);
        }
        Self::from_flat(dim, vocab_size, keys, tokens)
    }

    /// Builds from row-major keys; validates every invariant.
    pub fn from_flat(
        dim: usize,
        vocab_size: u32,
        keys: Vec<f32>,
        tokens: Vec<u32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "datastore dim must be positive".into(),
            ));
        }
        if vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if keys.len() != tokens.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: tokens.len() * dim,
                found: keys.len(),
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
        if let Some(pos) = keys.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: pos / dim });
        }
        Ok(Self {
            dim,
            vocab_size,
            keys,
            tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn key_f64(&self, i: usize) -> Vec<f64> {
        self.key(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn token(&self, i: usize) -> u32 {
        self.tokens[i]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn entry(&self, i: usize) -> Entry {
        Entry::new(self.key(i).to_vec(), self.token(i))
    }

    /// Applies `f` to every key (in `f64`) and stores the results as a new
    /// datastore of width `out_dim`. Tokens and order are preserved.
    pub fn map_keys<F>(&self, out_dim: usize, f: F) -> Result<Datastore>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .into_par_iter()
            .map(|i| f(&self.key_f64(i)))
            .collect::<Result<_>>()?;
        let mut keys = Vec::with_capacity(rows.len() * out_dim);
        for row in rows {
            if row.len() != out_dim {
                return Err(Error::DimensionMismatch {
                    expected: out_dim,
                    found: row.len(),
                });
            }
            keys.extend(row.into_iter().map(|v| v as f32));
        }
        Datastore::from_flat(out_dim, self.vocab_size, keys, self.tokens.clone())
    }

    /// Rebuilds the store in adapter output space: `key_i <- FFN(key_i)`.
    pub fn transform(&self, params: &AdapterParams) -> Result<Datastore> {
        if self.dim != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                found: self.dim,
            });
        }
        self.map_keys(params.output_dim(), |h| params.forward(h))
    }

    /// Exact byte length of the serialized form.
    pub fn encoded_len(count: u64, dim: u64) -> u64 {
        DATASTORE_HEADER_LEN + count * (dim * 4 + 4)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(Self::encoded_len(self.len() as u64, self.dim as u64) as usize);
        out.extend_from_slice(&DATASTORE_MAGIC);
        put_u32(&mut out, DATASTORE_VERSION);
        put_u64(&mut out, self.len() as u64);
        put_u32(&mut out, dim_u32(self.dim)?);
        put_u32(&mut out, self.vocab_size);
        for v in &self.keys {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASTORE_MAGIC)?;
        r.version(DATASTORE_VERSION)?;
        let count = r.u64()?;
        let dim = r.u32()? as u64;
        let vocab_size = r.u32()?;
        r.require(count.saturating_mul(dim * 4 + 4))?;
        let keys = r.f32s((count * dim) as usize)?;
        let tokens = r.u32s(count as usize)?;
        Self::from_flat(dim as usize, vocab_size, keys, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-token partition of a datastore plus the cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    dim: usize,
    tokens: Vec<u32>,
    members: Vec<Vec<usize>>,
    centers: Vec<Option<Vec<f64>>>,
    nonempty: Vec<u32>,
}

impl ClusterIndex {
    /// Partitions the entries of `ds` by token and computes each center.
    pub fn partition(ds: &Datastore) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        Ok(Self::from_keys(
            ds.tokens(),
            ds.vocab_size(),
            ds.dim(),
            ds.keys(),
        ))
    }

    /// Partition over arbitrary row-major keys (one row per token label).
    pub fn from_keys<T>(tokens: &[u32], vocab_size: u32, dim: usize, keys: &[T]) -> Self
    where
        T: Copy + Into<f64>,
    {
        assert_eq!(
            keys.len(),
            tokens.len() * dim,
            "keys/tokens length mismatch"
        );
        let mut members = vec![Vec::new(); vocab_size as usize];
        for (i, &t) in tokens.iter().enumerate() {
            members[t as usize].push(i);
        }
        let mut index = Self {
            dim,
            tokens: tokens.to_vec(),
            nonempty: (0..vocab_size)
                .filter(|&v| !members[v as usize].is_empty())
                .collect(),
            members,
            centers: Vec::new(),
        };
        index.centers = index.compute_centers(dim, keys);
        index
    }

    fn compute_centers<T: Copy + Into<f64>>(
        &self,
        dim: usize,
        keys: &[T],
    ) -> Vec<Option<Vec<f64>>> {
        self.members
            .iter()
            .map(|list| {
                if list.is_empty() {
                    return None;
                }
                let mut sum = vec![0.0f64; dim];
                for &i in list {
                    for (s, &v) in sum.iter_mut().zip(&keys[i * dim..(i + 1) * dim]) {
                        *s += v.into();
                    }
                }
                let n = list.len() as f64;
                Some(sum.into_iter().map(|s| s / n).collect())
            })
            .collect()
    }

    /// Same partition, centers recomputed from `keys` (which may live in a
    /// different space of width `dim`).
    pub fn with_centers_from<T: Copy + Into<f64>>(&self, dim: usize, keys: &[T]) -> Self {
        assert_eq!(
            keys.len(),
            self.tokens.len() * dim,
            "keys/tokens length mismatch"
        );
        Self {
            dim,
            tokens: self.tokens.clone(),
            members: self.members.clone(),
            centers: self.compute_centers(dim, keys),
            nonempty: self.nonempty.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn entry_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_of(&self, entry: usize) -> u32 {
        self.tokens[entry]
    }

    pub fn members(&self, token: u32) -> &[usize] {
        &self.members[token as usize]
    }

    pub fn center(&self, token: u32) -> Option<&[f64]> {
        self.centers[token as usize].as_deref()
    }

    /// Tokens with at least one member, ascending.
    pub fn nonempty_tokens(&self) -> &[u32] {
        &self.nonempty
    }
}

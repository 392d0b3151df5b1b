//! PCA reduction followed by unit-norm normalization, `g(x) = Norm(PCA(x))`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::io::{dim_u32, put_f64s, put_u32, Reader};

pub const PCA_MAGIC: [u8; 4] = *b"CLKP";
pub const PCA_VERSION: u32 = 1;
/// Projections shorter than this cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    input_dim: usize,
    mean: Vec<f64>,
    /// `p × input_dim`, one principal direction per row.
    components: Vec<f64>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    /// Fits the top-`p` principal directions of row-major `data`
    /// (`count × dim`) from the sample covariance.
    ///
    /// Components are ordered by decreasing variance; each is signed so its
    /// largest-magnitude coordinate is positive.
    pub fn fit(data: &[f64], dim: usize, p: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        if p == 0 || p > dim {
            return Err(Error::InvalidConfig(format!(
                "PCA output dim {p} must be in 1..={dim}"
            )));
        }
        let count = data.len() / dim;
        if count < 2 {
            return Err(Error::TooFewSamples { count, required: 2 });
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);

        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            centered
                .iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(c, (x, m))| *c = x - m);
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        let denom = (count - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let mut components = Vec::with_capacity(p * dim);
        let mut explained_variance = Vec::with_capacity(p);
        for &col in order.iter().take(p) {
            let v = eig.eigenvectors.column(col);
            let pivot = (0..dim).fold(
                0,
                |best, i| if v[i].abs() > v[best].abs() { i } else { best },
            );
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            components.extend(v.iter().map(|x| sign * x));
            explained_variance.push(eig.eigenvalues[col].max(0.0));
        }
        Ok(Self {
            input_dim: dim,
            mean,
            components,
            explained_variance,
        })
    }

    pub fn fit_datastore(ds: &Datastore, p: usize) -> Result<Self> {
        let data: Vec<f64> = ds.keys().iter().map(|&v| f64::from(v)).collect();
        Self::fit(&data, ds.dim(), p)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Coordinates of `x - mean` along each component.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(self
            .components
            .chunks_exact(self.input_dim)
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (v, m))| w * (v - m))
                    .sum()
            })
            .collect())
    }

    /// `g(x)`: projection scaled to unit length.
    pub fn project_normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.project(x)?;
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateProjection);
        }
        y.iter_mut().for_each(|v| *v /= n);
        Ok(y)
    }

    /// Applies `g` to every key of `ds`.
    pub fn transform_datastore(&self, ds: &Datastore) -> Result<Datastore> {
        if ds.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: ds.dim(),
            });
        }
        ds.map_keys(self.output_dim(), |x| self.project_normalize(x))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&PCA_MAGIC);
        put_u32(&mut out, PCA_VERSION);
        put_u32(&mut out, dim_u32(self.input_dim)?);
        put_u32(&mut out, dim_u32(self.output_dim())?);
        put_f64s(&mut out, &self.mean);
        put_f64s(&mut out, &self.components);
        put_f64s(&mut out, &self.explained_variance);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(PCA_MAGIC)?;
        r.version(PCA_VERSION)?;
        let d = r.u32()? as usize;
        let p = r.u32()? as usize;
        if d == 0 || p == 0 || p > d {
            return Err(Error::InvalidConfig(format!("bad PCA dims d_o={d} p={p}")));
        }
        r.require(8 * (d + p * d + p) as u64)?;
        let mean = r.f64s(d)?;
        let components = r.f64s(p * d)?;
        let explained_variance = r.f64s(p)?;
        Ok(Self {
            input_dim: d,
            mean,
            components,
            explained_variance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

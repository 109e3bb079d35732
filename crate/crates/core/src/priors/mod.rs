//! Learned densities used as regularizers.

mod arrays;
mod flow;
mod gmm;
mod nn;

pub use arrays::{Array, NamedArrays, PRIOR_FORMAT_VERSION};
pub use flow::{standard_normal_log_prob, CouplingLayer, Direction, FlowConfig, FlowModel, TrainReport};
pub use gmm::{GaussianComponent, GmmFit, GmmPrior, COVARIANCE_FLOOR};
pub use nn::{Linear, Mlp};

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dimensions whose spread is below this (relative to their magnitude) are
/// treated as constant and left out of the flow.
const CONSTANT_SPREAD: f64 = 1e-9;

/// A flow over standardized pose vectors.
///
/// Dimensions that never vary in the training data (for example the
/// root entries of a normalized pose) are dropped; the rest are shifted and
/// scaled to zero mean and unit variance before entering the flow. Densities
/// are reported in the standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrior {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub active: Vec<usize>,
    pub flow: FlowModel,
}

impl PosePrior {
    /// Identity flow over all `dim` dimensions without standardization.
    pub fn identity(dim: usize) -> Self {
        PosePrior {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            active: (0..dim).collect(),
            flow: FlowModel::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn train(samples: &[Vec<f64>], config: &FlowConfig) -> Result<(Self, TrainReport)> {
        let n = samples.len();
        let dim = samples.first().map_or(0, Vec::len);
        if n < 2 || dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::InsufficientData(
                "pose prior needs at least two samples of equal positive length".into(),
            ));
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; dim];
        for s in samples {
            for ((sc, v), m) in scale.iter_mut().zip(s).zip(&mean) {
                *sc += (v - m) * (v - m) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = s.sqrt());
        let active: Vec<usize> = (0..dim)
            .filter(|&i| scale[i] > CONSTANT_SPREAD * mean[i].abs().max(1.0))
            .collect();
        for i in 0..dim {
            if !active.contains(&i) {
                mean[i] = samples[0][i];
                scale[i] = 1.0;
            }
        }
        if active.len() < 2 && config.layers > 0 {
            return Err(Error::InsufficientData("fewer than two varying pose dimensions".into()));
        }
        let data = DMatrix::from_fn(active.len(), n, |r, c| {
            let i = active[r];
            (samples[c][i] - mean[i]) / scale[i]
        });
        let (flow, report) = FlowModel::train(&data, config)?;
        Ok((
            PosePrior {
                mean,
                scale,
                active,
                flow,
            },
            report,
        ))
    }

    fn standardize(&self, frames: &[&[f64]]) -> Result<DMatrix<f64>> {
        if let Some(q) = frames.iter().find(|q| q.len() != self.dim()) {
            return Err(Error::Shape(format!("pose prior expects dimension {}, got {}", self.dim(), q.len())));
        }
        Ok(DMatrix::from_fn(self.active.len(), frames.len(), |r, c| {
            let i = self.active[r];
            (frames[c][i] - self.mean[i]) / self.scale[i]
        }))
    }

    pub fn log_prob(&self, q: &[f64]) -> Result<f64> {
        Ok(self.flow.log_prob_batch(&self.standardize(&[q])?)?[0])
    }

    /// Log-densities of several pose vectors and their gradients.
    pub fn log_prob_with_grad(&self, frames: &[&[f64]]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (lp, grad) = self.flow.log_prob_with_grad(&self.standardize(frames)?)?;
        let grads = grad
            .column_iter()
            .map(|col| {
                let mut g = vec![0.0; self.dim()];
                for (r, &i) in self.active.iter().enumerate() {
                    g[i] = col[r] / self.scale[i];
                }
                g
            })
            .collect();
        Ok((lp, grads))
    }

    /// Samples in the original (unstandardized) pose space.
    pub fn sample(&self, count: usize, rng: &mut impl rand::Rng) -> Result<Vec<Vec<f64>>> {
        let z = self.flow.sample(count, rng)?;
        Ok(z.column_iter()
            .map(|col| {
                let mut q = self.mean.clone();
                for (r, &i) in self.active.iter().enumerate() {
                    q[i] += col[r] * self.scale[i];
                }
                q
            })
            .collect())
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let mut out = NamedArrays::new("pose_flow");
        out.insert("mean", vec![self.dim()], self.mean.clone());
        out.insert("scale", vec![self.dim()], self.scale.clone());
        out.insert(
            "active",
            vec![self.active.len()],
            self.active.iter().map(|&i| i as f64).collect(),
        );
        self.flow.to_arrays(&mut out, "flow.");
        out
    }

    pub fn from_arrays(arrays: &NamedArrays) -> Result<Self> {
        arrays.expect_kind("pose_flow")?;
        let mean = arrays.get("mean", &[None])?.data.clone();
        let dim = mean.len();
        let scale = arrays.get("scale", &[Some(dim)])?.data.clone();
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("pose prior scales must be positive".into()));
        }
        let active_raw = &arrays.get("active", &[None])?.data;
        let mut active = Vec::with_capacity(active_raw.len());
        for &a in active_raw {
            if a < 0.0 || a.fract() != 0.0 || a as usize >= dim || active.last().is_some_and(|&p| p >= a as usize) {
                return Err(Error::Format("pose prior active indices must be increasing and in range".into()));
            }
            active.push(a as usize);
        }
        let flow = FlowModel::from_arrays(arrays, "flow.")?;
        if flow.dim != active.len() {
            return Err(Error::Format("flow dimension does not match the active set".into()));
        }
        Ok(PosePrior {
            mean,
            scale,
            active,
            flow,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_arrays(&NamedArrays::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_arrays().save(path)
    }
}

impl GmmPrior {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_arrays(&NamedArrays::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_arrays().save(path)
    }
}

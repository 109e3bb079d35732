//! Full-covariance Gaussian mixture prior fitted by EM.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::arrays::NamedArrays;
use crate::error::{Error, Result};

pub const COVARIANCE_FLOOR: f64 = 1e-6;
const MAX_EM_ITERATIONS: usize = 500;
const EM_RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// `log(weight) - d/2 log(2 pi) - 1/2 log|cov|`
    log_scale: f64,
}

impl GaussianComponent {
    fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let factor = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Numeric("mixture covariance is not positive definite".into()))?;
        let d = mean.len() as f64;
        let log_det: f64 = 2.0 * factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GaussianComponent {
            log_scale: weight.ln() - 0.5 * d * (2.0 * PI).ln() - 0.5 * log_det,
            weight,
            mean,
            covariance,
            factor,
        })
    }

    /// Weighted log-density and the whitened offset `cov^-1 (x - mean)`.
    fn weighted_log_density(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = x - &self.mean;
        let white = self.factor.solve(&diff);
        (self.log_scale - 0.5 * diff.dot(&white), white)
    }
}

#[derive(Debug, Clone)]
pub struct GmmPrior {
    pub dim: usize,
    pub components: Vec<GaussianComponent>,
}

/// EM outcome with the data log-likelihood at every iterate.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub prior: GmmPrior,
    pub log_likelihood: Vec<f64>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Projects a symmetric matrix onto `{S : S >= floor I}` by clamping eigenvalues.
fn clamp_eigenvalues(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

impl GmmPrior {
    /// Builds a prior after checking weights, shapes and definiteness.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let g = weights.len();
        if g == 0 || means.len() != g || covariances.len() != g {
            return Err(Error::Shape("mixture needs matching non-empty weights, means and covariances".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) || covariances.iter().any(|c| c.shape() != (dim, dim)) {
            return Err(Error::Shape("mixture component dimensions disagree".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Format("mixture weights must be non-negative and sum to 1".into()));
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(covariances)
            .map(|((w, m), c)| GaussianComponent::new(w, m, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmPrior { dim, components })
    }

    /// Single standard-normal component of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        GmmPrior::new(vec![1.0], vec![DVector::zeros(dim)], vec![DMatrix::identity(dim, dim)])
            .expect("identity covariance is valid")
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("mixture expects dimension {}, got {}", self.dim, x.len())));
        }
        Ok(())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let x = DVector::from_column_slice(x);
        let terms: Vec<f64> = self.components.iter().map(|c| c.weighted_log_density(&x).0).collect();
        Ok(log_sum_exp(&terms))
    }

    /// Log-density and its gradient with respect to `x`.
    pub fn log_prob_with_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let x = DVector::from_column_slice(x);
        let parts: Vec<(f64, DVector<f64>)> = self.components.iter().map(|c| c.weighted_log_density(&x)).collect();
        let terms: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let total = log_sum_exp(&terms);
        let mut grad = DVector::zeros(self.dim);
        for (lp, white) in &parts {
            let r = (lp - total).exp();
            if r > 0.0 {
                grad -= white * r;
            }
        }
        Ok((total, grad.as_slice().to_vec()))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&c.mean + c.factor.l_dirty().lower_triangle() * z).as_slice().to_vec()
    }

    pub fn fit(samples: &[Vec<f64>], components: usize, seed: u64) -> Result<GmmFit> {
        let n = samples.len();
        if components == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = samples.first().map_or(0, Vec::len);
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Shape("samples must share a positive dimension".into()));
        }
        if n < components * (dim + 1) {
            return Err(Error::InsufficientData(format!(
                "{n} samples for {components} components of dimension {dim}; need {}",
                components * (dim + 1)
            )));
        }
        let data: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = kmeans_plus_plus(&data, components, &mut rng);
        let mut resp = vec![vec![0.0; components]; n];
        for (x, r) in data.iter().zip(&mut resp) {
            let nearest = (0..components)
                .min_by(|&a, &b| (x - &centers[a]).norm_squared().total_cmp(&(x - &centers[b]).norm_squared()))
                .expect("components > 0");
            r[nearest] = 1.0;
        }
        let mut prior = m_step(&data, &resp, None)?;
        let mut trace = Vec::new();
        for _ in 0..MAX_EM_ITERATIONS {
            let ll = e_step(&prior, &data, &mut resp);
            if !ll.is_finite() {
                return Err(Error::Numeric("mixture log-likelihood is not finite".into()));
            }
            let converged = trace
                .last()
                .is_some_and(|&prev: &f64| ll - prev < EM_RELATIVE_TOLERANCE * ll.abs().max(1.0));
            trace.push(ll);
            if converged {
                break;
            }
            prior = m_step(&data, &resp, Some(&prior))?;
        }
        if trace.len() == MAX_EM_ITERATIONS {
            // The last M-step has not been scored yet.
            trace.push(e_step(&prior, &data, &mut resp));
        }
        Ok(GmmFit {
            prior,
            log_likelihood: trace,
        })
    }

    pub fn total_log_likelihood(&self, samples: &[Vec<f64>]) -> Result<f64> {
        samples.iter().map(|s| self.log_prob(s)).sum()
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let g = self.components.len();
        let d = self.dim;
        let mut out = NamedArrays::new("gmm");
        out.insert("weights", vec![g], self.components.iter().map(|c| c.weight).collect());
        out.insert(
            "means",
            vec![g, d],
            self.components.iter().flat_map(|c| c.mean.iter().copied()).collect(),
        );
        out.insert(
            "covariances",
            vec![g, d, d],
            self.components
                .iter()
                .flat_map(|c| c.covariance.transpose().as_slice().to_vec())
                .collect(),
        );
        out
    }

    pub fn from_arrays(arrays: &NamedArrays) -> Result<Self> {
        arrays.expect_kind("gmm")?;
        let w = arrays.get("weights", &[None])?;
        let g = w.shape[0];
        let m = arrays.get("means", &[Some(g), None])?;
        let d = m.shape[1];
        let c = arrays.get("covariances", &[Some(g), Some(d), Some(d)])?;
        GmmPrior::new(
            w.data.clone(),
            m.data.chunks(d).map(DVector::from_column_slice).collect(),
            c.data.chunks(d * d).map(|b| DMatrix::from_row_slice(d, d, b)).collect(),
        )
    }
}

fn kmeans_plus_plus(data: &[DVector<f64>], k: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[next].clone());
        let c = centers.last().expect("just pushed");
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min((x - c).norm_squared());
        }
    }
    centers
}

/// Fills responsibilities and returns the total log-likelihood.
fn e_step(prior: &GmmPrior, data: &[DVector<f64>], resp: &mut [Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut terms = vec![0.0; prior.components.len()];
    for (x, r) in data.iter().zip(resp.iter_mut()) {
        for (t, c) in terms.iter_mut().zip(&prior.components) {
            *t = c.weighted_log_density(x).0;
        }
        let lse = log_sum_exp(&terms);
        total += lse;
        for (ri, t) in r.iter_mut().zip(&terms) {
            *ri = (t - lse).exp();
        }
    }
    total
}

fn m_step(data: &[DVector<f64>], resp: &[Vec<f64>], previous: Option<&GmmPrior>) -> Result<GmmPrior> {
    let n = data.len() as f64;
    let dim = data[0].len();
    let g = resp[0].len();
    let mut weights = Vec::with_capacity(g);
    let mut means = Vec::with_capacity(g);
    let mut covs = Vec::with_capacity(g);
    for k in 0..g {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        weights.push(nk / n);
        if nk < 1e-10 * n {
            // A starved component keeps its shape; its weight is what matters.
            match previous {
                Some(p) => {
                    means.push(p.components[k].mean.clone());
                    covs.push(p.components[k].covariance.clone());
                }
                None => {
                    means.push(data[0].clone());
                    covs.push(DMatrix::identity(dim, dim));
                }
            }
            continue;
        }
        let mut mean = DVector::zeros(dim);
        for (x, r) in data.iter().zip(resp) {
            mean.axpy(r[k], x, 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(dim, dim);
        for (x, r) in data.iter().zip(resp) {
            let d = x - &mean;
            cov.ger(r[k], &d, &d, 1.0);
        }
        cov /= nk;
        covs.push(clamp_eigenvalues(cov, COVARIANCE_FLOOR));
        means.push(mean);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmPrior::new(weights, means, covs)
}

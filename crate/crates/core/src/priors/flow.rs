//! Real-NVP normalizing flow with affine coupling layers.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arrays::NamedArrays;
use super::nn::{Linear, Mlp, MlpTrace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Latent to data.
    Forward,
    /// Data to latent.
    Inverse,
}

/// One affine coupling: passive dimensions are copied and condition an
/// elementwise affine map of the active ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub active: Vec<usize>,
    pub passive: Vec<usize>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub scale_limit: f64,
    pub layers: Vec<CouplingLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    pub scale_limit: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 8,
            hidden: 64,
            scale_limit: 3.0,
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_nll: f64,
    pub final_nll: f64,
    /// Mean training NLL after each epoch.
    pub epoch_nll: Vec<f64>,
}

struct LayerTrace {
    scale: MlpTrace,
    shift: MlpTrace,
    tanh: DMatrix<f64>,
    exp_neg_scale: DMatrix<f64>,
    active_out: DMatrix<f64>,
}

pub fn standard_normal_log_prob(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

fn gather(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

fn scatter(x: &mut DMatrix<f64>, rows: &[usize], values: &DMatrix<f64>) {
    for (r, &row) in rows.iter().enumerate() {
        for c in 0..x.ncols() {
            x[(row, c)] = values[(r, c)];
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} in flow")))
    }
}

impl CouplingLayer {
    fn scale_and_shift(&self, passive: &DMatrix<f64>, limit: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, MlpTrace, MlpTrace)> {
        let (raw, scale_trace) = self.scale_net.forward(passive);
        let (shift, shift_trace) = self.shift_net.forward(passive);
        check_finite(&raw, "scale output")?;
        check_finite(&shift, "shift output")?;
        let tanh = raw.map(f64::tanh);
        let scale = &tanh * limit;
        Ok((scale, tanh, shift, scale_trace, shift_trace))
    }
}

impl FlowModel {
    /// The identity flow.
    pub fn identity(dim: usize) -> Self {
        FlowModel {
            dim,
            scale_limit: 3.0,
            layers: Vec::new(),
        }
    }

    /// Fresh flow whose coupling layers alternate between odd and even dimensions.
    /// Output layers start at zero, so the initial flow is the identity map.
    pub fn new(dim: usize, config: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers > 0 && dim < 2 {
            return Err(Error::Config("coupling layers need at least 2 dimensions".into()));
        }
        let layers = (0..config.layers)
            .map(|l| {
                let (active, passive): (Vec<usize>, Vec<usize>) = (0..dim).partition(|i| (i + l) % 2 == 1);
                CouplingLayer {
                    scale_net: Mlp::new(passive.len(), config.hidden, active.len(), rng),
                    shift_net: Mlp::new(passive.len(), config.hidden, active.len(), rng),
                    active,
                    passive,
                }
            })
            .collect();
        Ok(FlowModel {
            dim,
            scale_limit: config.scale_limit,
            layers,
        })
    }

    fn check_dim(&self, rows: usize) -> Result<()> {
        if rows != self.dim {
            return Err(Error::Shape(format!("flow expects dimension {}, got {rows}", self.dim)));
        }
        Ok(())
    }

    /// Applies the flow to each column of `x`. Returns the mapped batch and the
    /// log-determinant of the applied direction per column.
    pub fn transform_batch(&self, x: &DMatrix<f64>, direction: Direction) -> Result<(DMatrix<f64>, Vec<f64>)> {
        self.check_dim(x.nrows())?;
        let mut y = x.clone();
        let mut log_det = vec![0.0; x.ncols()];
        let order: Box<dyn Iterator<Item = &CouplingLayer>> = match direction {
            Direction::Forward => Box::new(self.layers.iter()),
            Direction::Inverse => Box::new(self.layers.iter().rev()),
        };
        for layer in order {
            let passive = gather(&y, &layer.passive);
            let (scale, _, shift, _, _) = layer.scale_and_shift(&passive, self.scale_limit)?;
            let active = gather(&y, &layer.active);
            let (out, sign) = match direction {
                Direction::Forward => (active.component_mul(&scale.map(f64::exp)) + shift, 1.0),
                Direction::Inverse => ((active - shift).component_mul(&scale.map(|s| (-s).exp())), -1.0),
            };
            scatter(&mut y, &layer.active, &out);
            for (ld, col) in log_det.iter_mut().zip(scale.column_iter()) {
                *ld += sign * col.sum();
            }
        }
        check_finite(&y, "transform output")?;
        Ok((y, log_det))
    }

    pub fn transform(&self, input: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let (y, ld) = self.transform_batch(&x, direction)?;
        Ok((y.as_slice().to_vec(), ld[0]))
    }

    pub fn log_prob(&self, q: &[f64]) -> Result<f64> {
        let (z, log_det) = self.transform(q, Direction::Inverse)?;
        Ok(standard_normal_log_prob(&z) + log_det)
    }

    pub fn log_prob_batch(&self, q: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (z, log_det) = self.transform_batch(q, Direction::Inverse)?;
        Ok(z.column_iter()
            .zip(log_det)
            .map(|(col, ld)| standard_normal_log_prob(col.as_slice()) + ld)
            .collect())
    }

    /// Log-density of each column and its gradient with respect to the column.
    pub fn log_prob_with_grad(&self, q: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (nll, grad) = self.nll_backward(q, None)?;
        Ok((nll.into_iter().map(|v| -v).collect(), -grad))
    }

    /// Per-column negative log-likelihood and its input gradient; parameter
    /// gradients of the summed NLL are accumulated into `param_grads`.
    fn nll_backward(&self, q: &DMatrix<f64>, mut param_grads: Option<&mut [(Mlp, Mlp)]>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_dim(q.nrows())?;
        let batch = q.ncols();
        let mut y = q.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut scale_sum = vec![0.0; batch];
        for layer in self.layers.iter().rev() {
            let passive = gather(&y, &layer.passive);
            let (scale, tanh, shift, scale_trace, shift_trace) = layer.scale_and_shift(&passive, self.scale_limit)?;
            let exp_neg_scale = scale.map(|s| (-s).exp());
            let active_out = (gather(&y, &layer.active) - shift).component_mul(&exp_neg_scale);
            scatter(&mut y, &layer.active, &active_out);
            for (acc, col) in scale_sum.iter_mut().zip(scale.column_iter()) {
                *acc += col.sum();
            }
            traces.push(LayerTrace {
                scale: scale_trace,
                shift: shift_trace,
                tanh,
                exp_neg_scale,
                active_out,
            });
        }
        check_finite(&y, "latent")?;
        let nll: Vec<f64> = y
            .column_iter()
            .zip(&scale_sum)
            .map(|(z, s)| -standard_normal_log_prob(z.as_slice()) + s)
            .collect();

        // Walk back from the latent towards the data.
        let mut grad = y;
        for (idx, (layer, trace)) in self.layers.iter().zip(traces.iter().rev()).enumerate() {
            let g_out = gather(&grad, &layer.active);
            let g_active_in = g_out.component_mul(&trace.exp_neg_scale);
            let g_shift = -&g_active_in;
            let limit = self.scale_limit;
            let g_raw = DMatrix::from_fn(g_out.nrows(), batch, |r, c| {
                let g_scale = 1.0 - g_out[(r, c)] * trace.active_out[(r, c)];
                let t = trace.tanh[(r, c)];
                g_scale * limit * (1.0 - t * t)
            });
            let (scale_grads, shift_grads) = match param_grads.as_deref_mut() {
                Some(pg) => {
                    let (a, b) = &mut pg[idx];
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            let g_passive = layer.scale_net.backward(&trace.scale, &g_raw, scale_grads)
                + layer.shift_net.backward(&trace.shift, &g_shift, shift_grads);
            let g_passive = gather(&grad, &layer.passive) + g_passive;
            scatter(&mut grad, &layer.active, &g_active_in);
            scatter(&mut grad, &layer.passive, &g_passive);
        }
        Ok((nll, grad))
    }

    /// Draws `count` samples by pushing standard-normal latents through the flow.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        let z = DMatrix::from_fn(self.dim, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(self.transform_batch(&z, Direction::Forward)?.0)
    }

    pub fn mean_nll(&self, data: &DMatrix<f64>) -> Result<f64> {
        let lp = self.log_prob_batch(data)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    fn flatten(&self, nets: impl Fn(&CouplingLayer) -> [&Mlp; 2]) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for net in nets(layer) {
                net.for_each_buffer(|b| out.extend_from_slice(b));
            }
        }
        out
    }

    fn params(&self) -> Vec<f64> {
        self.flatten(|l| [&l.scale_net, &l.shift_net])
    }

    fn set_params(&mut self, values: &[f64]) {
        let mut k = 0;
        for layer in &mut self.layers {
            for net in [&mut layer.scale_net, &mut layer.shift_net] {
                net.for_each_buffer_mut(|b| {
                    b.copy_from_slice(&values[k..k + b.len()]);
                    k += b.len();
                });
            }
        }
    }

    /// Maximum-likelihood training on the columns of `data` with AdamW and a
    /// cosine-annealed learning rate. Deterministic given the config seed.
    pub fn train(data: &DMatrix<f64>, config: &FlowConfig) -> Result<(FlowModel, TrainReport)> {
        let dim = data.nrows();
        let count = data.ncols();
        if count == 0 {
            return Err(Error::InsufficientData("no training samples".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut flow = FlowModel::new(dim, config, &mut rng)?;
        let initial_nll = flow.mean_nll(data)?;
        let mut report = TrainReport {
            initial_nll,
            final_nll: initial_nll,
            epoch_nll: Vec::new(),
        };
        if flow.layers.is_empty() || config.epochs == 0 {
            return Ok((flow, report));
        }
        let batches_per_epoch = count.div_ceil(config.batch_size);
        let total_steps = (config.epochs * batches_per_epoch) as f64;
        let mut params = flow.params();
        let mut adam = AdamW::new(params.len(), config.weight_decay);
        let mut order: Vec<usize> = (0..count).collect();
        let mut step = 0usize;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch = DMatrix::from_fn(dim, chunk.len(), |r, c| data[(r, chunk[c])]);
                let mut grads: Vec<(Mlp, Mlp)> = flow
                    .layers
                    .iter()
                    .map(|l| (l.scale_net.zeros_like(), l.shift_net.zeros_like()))
                    .collect();
                let (nll, _) = flow
                    .nll_backward(&batch, Some(&mut grads))
                    .map_err(|e| Error::TrainingFailure(e.to_string()))?;
                let batch_sum: f64 = nll.iter().sum();
                if !batch_sum.is_finite() {
                    return Err(Error::TrainingFailure("non-finite training loss".into()));
                }
                epoch_sum += batch_sum;
                let mut flat = Vec::with_capacity(params.len());
                for (a, b) in &grads {
                    a.for_each_buffer(|buf| flat.extend_from_slice(buf));
                    b.for_each_buffer(|buf| flat.extend_from_slice(buf));
                }
                let inv = 1.0 / chunk.len() as f64;
                flat.iter_mut().for_each(|g| *g *= inv);
                let lr = 0.5 * config.learning_rate * (1.0 + (PI * step as f64 / total_steps).cos());
                adam.step(&mut params, &flat, lr);
                flow.set_params(&params);
                step += 1;
            }
            report.epoch_nll.push(epoch_sum / count as f64);
        }
        report.final_nll = flow
            .mean_nll(data)
            .map_err(|e| Error::TrainingFailure(e.to_string()))?;
        if !report.final_nll.is_finite() {
            return Err(Error::TrainingFailure("non-finite final NLL".into()));
        }
        Ok((flow, report))
    }

    pub fn to_arrays(&self, out: &mut NamedArrays, prefix: &str) {
        out.scalar(&format!("{prefix}dim"), self.dim as f64);
        out.scalar(&format!("{prefix}scale_limit"), self.scale_limit);
        out.scalar(&format!("{prefix}layers"), self.layers.len() as f64);
        for (l, layer) in self.layers.iter().enumerate() {
            let mask: Vec<f64> = (0..self.dim)
                .map(|i| if layer.active.contains(&i) { 1.0 } else { 0.0 })
                .collect();
            out.insert(format!("{prefix}layer{l:02}.mask"), vec![self.dim], mask);
            for (name, net) in [("scale", &layer.scale_net), ("shift", &layer.shift_net)] {
                for (k, lin) in net.layers.iter().enumerate() {
                    let base = format!("{prefix}layer{l:02}.{name}.{k}");
                    // Row-major so the stored shape reads [out, in].
                    let w: Vec<f64> = lin.weight.transpose().as_slice().to_vec();
                    out.insert(format!("{base}.weight"), vec![lin.outputs(), lin.inputs()], w);
                    out.insert(format!("{base}.bias"), vec![lin.outputs()], lin.bias.as_slice().to_vec());
                }
            }
        }
    }

    pub fn from_arrays(arrays: &NamedArrays, prefix: &str) -> Result<Self> {
        let count = |name: &str| -> Result<usize> {
            let v = arrays.get_scalar(&format!("{prefix}{name}"))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("`{prefix}{name}` must be a count")));
            }
            Ok(v as usize)
        };
        let dim = count("dim")?;
        let scale_limit = arrays.get_scalar(&format!("{prefix}scale_limit"))?;
        if scale_limit <= 0.0 {
            return Err(Error::Format("scale_limit must be positive".into()));
        }
        let mut layers = Vec::new();
        for l in 0..count("layers")? {
            let mask = &arrays.get(&format!("{prefix}layer{l:02}.mask"), &[Some(dim)])?.data;
            let (active, passive): (Vec<usize>, Vec<usize>) = (0..dim).partition(|&i| mask[i] == 1.0);
            if active.is_empty() || passive.is_empty() || mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Format(format!("layer {l} has an invalid mask")));
            }
            let net = |name: &str| -> Result<Mlp> {
                let mut lins = Vec::new();
                let mut inputs = passive.len();
                for k in 0..3 {
                    let base = format!("{prefix}layer{l:02}.{name}.{k}");
                    let outputs = if k == 2 { Some(active.len()) } else { None };
                    let w = arrays.get(&format!("{base}.weight"), &[outputs, Some(inputs)])?;
                    let rows = w.shape[0];
                    let b = arrays.get(&format!("{base}.bias"), &[Some(rows)])?;
                    lins.push(Linear {
                        weight: DMatrix::from_row_slice(rows, inputs, &w.data),
                        bias: nalgebra::DVector::from_column_slice(&b.data),
                    });
                    inputs = rows;
                }
                let [a, b, c]: [Linear; 3] = lins.try_into().expect("three layers");
                Ok(Mlp { layers: [a, b, c] })
            };
            layers.push(CouplingLayer {
                scale_net: net("scale")?,
                shift_net: net("shift")?,
                active,
                passive,
            });
        }
        for i in 0..dim {
            if layers.len() > 1 && !layers.iter().any(|l| l.active.contains(&i)) {
                return Err(Error::Format(format!("dimension {i} is never transformed")));
            }
        }
        Ok(FlowModel {
            dim,
            scale_limit,
            layers,
        })
    }
}

struct AdamW {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
    weight_decay: f64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, weight_decay: f64) -> Self {
        AdamW {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
            weight_decay,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.steps);
        let c2 = 1.0 - Self::BETA2.powi(self.steps);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = Self::BETA1 * self.first[i] + (1.0 - Self::BETA1) * g;
            self.second[i] = Self::BETA2 * self.second[i] + (1.0 - Self::BETA2) * g * g;
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] -= lr * (m / (v.sqrt() + Self::EPS) + self.weight_decay * params[i]);
        }
    }
}

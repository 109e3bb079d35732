//! Small batched multilayer perceptron with a hand-written backward pass.
//!
//! Batches are stored column-wise: an `n x B` matrix holds `B` samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    /// Uniform Glorot initialization.
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Linear {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-limit..limit)),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Two tanh hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: [Linear; 3],
}

pub struct MlpTrace {
    input: DMatrix<f64>,
    hidden1: DMatrix<f64>,
    hidden2: DMatrix<f64>,
}

impl Mlp {
    /// Random hidden layers and a zero output layer, so the network starts at 0.
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            layers: [
                Linear::random(inputs, hidden, rng),
                Linear::random(hidden, hidden, rng),
                Linear::zeros(hidden, outputs),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .each_ref()
                .map(|l| Linear::zeros(l.inputs(), l.outputs())),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpTrace) {
        let hidden1 = self.layers[0].apply(x).map(f64::tanh);
        let hidden2 = self.layers[1].apply(&hidden1).map(f64::tanh);
        let out = self.layers[2].apply(&hidden2);
        (
            out,
            MlpTrace {
                input: x.clone(),
                hidden1,
                hidden2,
            },
        )
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients into `grads`
    /// when given, and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &DMatrix<f64>, grads: Option<&mut Mlp>) -> DMatrix<f64> {
        let tanh_back = |g: DMatrix<f64>, a: &DMatrix<f64>| g.zip_map(a, |g, a| g * (1.0 - a * a));
        let g2 = tanh_back(self.layers[2].weight.tr_mul(grad_out), &trace.hidden2);
        let g1 = tanh_back(self.layers[1].weight.tr_mul(&g2), &trace.hidden1);
        if let Some(grads) = grads {
            let accumulate = |lin: &mut Linear, g: &DMatrix<f64>, a: &DMatrix<f64>| {
                lin.weight.gemm(1.0, g, &a.transpose(), 1.0);
                lin.bias += g.column_sum();
            };
            accumulate(&mut grads.layers[2], grad_out, &trace.hidden2);
            accumulate(&mut grads.layers[1], &g2, &trace.hidden1);
            accumulate(&mut grads.layers[0], &g1, &trace.input);
        }
        self.layers[0].weight.tr_mul(&g1)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    /// Visits every parameter buffer in a fixed order.
    pub fn for_each_buffer(&self, mut f: impl FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weight.as_slice());
            f(l.bias.as_slice());
        }
    }

    pub fn for_each_buffer_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight.as_mut_slice());
            f(l.bias.as_mut_slice());
        }
    }
}

//! Two-layer perceptron with a flat parameter vector, shared by the
//! cold-start mapper and the policy networks.
//!
//! Parameter layout: `w1` (hidden × input, row major), `b1`, `w2`
//! (output × hidden, row major), `b2`. Gradients use the same layout.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation value.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Mlp {
            input,
            hidden,
            output,
            activation,
            params: vec![0.0; Self::param_count(input, hidden, output)],
        }
    }

    /// Every parameter uniform in `[-scale, scale]`.
    pub fn uniform(input: usize, hidden: usize, output: usize, activation: Activation, scale: f64, seed: u64) -> Self {
        let mut net = Self::zeros(input, hidden, output, activation);
        let mut rng = seed::rng(seed);
        for p in &mut net.params {
            *p = rng.gen_range(-scale..=scale);
        }
        net
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.hidden * self.input]
    }

    pub fn w2(&self) -> &[f64] {
        let (_, w2, b2) = self.offsets();
        &self.params[w2..b2]
    }

    /// Indices of weight (non-bias) parameters.
    pub fn weight_ranges(&self) -> [std::ops::Range<usize>; 2] {
        let (b1, w2, b2) = self.offsets();
        [0..b1, w2..b2]
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        debug_assert_eq!(x.len(), self.input);
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut hidden_pre = p[b1..w2].to_vec();
        for (h, pre) in hidden_pre.iter_mut().enumerate() {
            let row = &p[h * self.input..(h + 1) * self.input];
            for (w, xi) in row.iter().zip(x) {
                if *xi != 0.0 {
                    *pre += w * xi;
                }
            }
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&z| self.activation.apply(z)).collect();
        let mut output = p[b2..].to_vec();
        for (o, out) in output.iter_mut().enumerate() {
            let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
            *out += row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        Forward {
            hidden_pre,
            hidden,
            output,
        }
    }

    /// Accumulate `scale * d(output · grad_out)/d(params)` into `grad`.
    pub fn backward(&self, x: &[f64], fwd: &Forward, grad_out: &[f64], scale: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let (b1, w2, b2) = self.offsets();
        let mut grad_hidden = vec![0.0; self.hidden];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            grad[b2 + o] += g;
            let row = w2 + o * self.hidden;
            for h in 0..self.hidden {
                grad[row + h] += g * fwd.hidden[h];
                grad_hidden[h] += g * self.params[row + h];
            }
        }
        for h in 0..self.hidden {
            let g = grad_hidden[h] * self.activation.derivative(fwd.hidden_pre[h], fwd.hidden[h]);
            if g == 0.0 {
                continue;
            }
            grad[b1 + h] += g;
            let row = h * self.input;
            for (i, xi) in x.iter().enumerate() {
                if *xi != 0.0 {
                    grad[row + i] += g * xi;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

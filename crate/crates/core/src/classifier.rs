//! One-hidden-layer ReLU network with a softmax head.

use serde::{Deserialize, Serialize};

use crate::numerics::{argmax, softmax_in_place, Matrix, Rng};
use crate::optim::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// D x H
    pub hidden_w: Matrix,
    pub hidden_b: Vec<f64>,
    /// H x C
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl Parameters for ClassifierParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.hidden_w.data(), &self.hidden_b, self.out_w.data(), &self.out_b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.hidden_w.data_mut(), &mut self.hidden_b, self.out_w.data_mut(), &mut self.out_b]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ClassifierTrace {
    pub pre: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` when dropout is off.
    pub mask: Option<Matrix>,
    pub hidden: Matrix,
    pub probs: Matrix,
}

impl ClassifierParams {
    /// He-style Gaussian weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            hidden_w: rng.normal_matrix(input_dim, hidden, (2.0 / input_dim as f64).sqrt()),
            hidden_b: vec![0.0; hidden],
            out_w: rng.normal_matrix(hidden, classes, (2.0 / hidden as f64).sqrt()),
            out_b: vec![0.0; classes],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_w.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.out_w.cols()
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut pre = x.matmul(&self.hidden_w);
        pre.add_row_vector(&self.hidden_b);
        pre.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = pre.matmul(&self.out_w);
        z.add_row_vector(&self.out_b);
        z
    }

    /// Forward pass; `dropout` is `(rate, rng)` when active.
    pub fn forward(&self, x: &Matrix, dropout: Option<(f64, &mut Rng)>) -> ClassifierTrace {
        let mut pre = x.matmul(&self.hidden_w);
        pre.add_row_vector(&self.hidden_b);
        let mut hidden = pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mask = dropout.filter(|(rate, _)| *rate > 0.0).map(|(rate, rng)| {
            let keep = 1.0 / (1.0 - rate);
            let m = Matrix::from_fn(pre.rows(), pre.cols(), |_, _| if rng.uniform() < rate { 0.0 } else { keep });
            for (h, k) in hidden.data_mut().iter_mut().zip(m.data()) {
                *h *= k;
            }
            m
        });
        let mut probs = hidden.matmul(&self.out_w);
        probs.add_row_vector(&self.out_b);
        for i in 0..probs.rows() {
            softmax_in_place(probs.row_mut(i));
        }
        ClassifierTrace { pre, mask, hidden, probs }
    }

    /// Gradients given dL/dlogits.
    pub fn backward_from_logits(&self, x: &Matrix, trace: &ClassifierTrace, g_logits: &Matrix) -> ClassifierParams {
        let out_w = trace.hidden.t_matmul(g_logits);
        let out_b = g_logits.sum_rows();
        let mut g_pre = g_logits.matmul_t(&self.out_w);
        for (idx, g) in g_pre.data_mut().iter_mut().enumerate() {
            let m = trace.mask.as_ref().map_or(1.0, |m| m.data()[idx]);
            if trace.pre.data()[idx] <= 0.0 {
                *g = 0.0;
            } else {
                *g *= m;
            }
        }
        let hidden_w = x.t_matmul(&g_pre);
        let hidden_b = g_pre.sum_rows();
        ClassifierParams { hidden_w, hidden_b, out_w, out_b }
    }

    /// Gradients given dL/dprobs, pulled back through the softmax.
    pub fn backward_from_probs(&self, x: &Matrix, trace: &ClassifierTrace, g_probs: &Matrix) -> ClassifierParams {
        self.backward_from_logits(x, trace, &softmax_backward(&trace.probs, g_probs))
    }

    pub fn predict(&self, x: &Matrix) -> (Matrix, Vec<usize>) {
        let probs = self.forward(x, None).probs;
        let labels = probs.row_iter().map(argmax).collect();
        (probs, labels)
    }
}

/// Pulls a gradient w.r.t. softmax outputs back to its logits, row by row.
pub fn softmax_backward(probs: &Matrix, g_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = g_probs.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pj), &gj) in out.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pj * (gj - inner);
        }
    }
    out
}

/// Mean cross-entropy of softmax outputs against soft targets, and
/// dL/dlogits = (probs - targets) / N for targets that sum to one.
pub fn soft_cross_entropy(probs: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = probs.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let t_sum: f64 = targets.row(i).iter().sum();
        for j in 0..probs.cols() {
            let t = targets[(i, j)];
            if t > 0.0 {
                loss -= t * probs[(i, j)].max(crate::numerics::LOG_FLOOR).ln();
            }
            grad[(i, j)] = (t_sum * probs[(i, j)] - t) / n;
        }
    }
    (loss / n, grad)
}

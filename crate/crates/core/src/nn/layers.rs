//! Dense layer, softmax, cross-entropy, max-pooling-over-time and dropout.

use rand::Rng;

use super::mat::{add_w_y, add_wt_x, Mat};
use super::NnError;

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fully connected layer: y = Wᵀx + b with W of shape d_in x d_out.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        DenseParams {
            w: Mat::zeros(d_in, d_out),
            b: vec![0.0; d_out],
        }
    }

    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        DenseParams {
            w: Mat::glorot_uniform(d_in, d_out, rng),
            b: vec![0.0; d_out],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }

    pub fn append_values(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.values());
        out.extend_from_slice(&self.b);
    }

    pub fn load_values(&mut self, src: &mut &[f64]) {
        let n = self.w.values().len();
        let (head, tail) = src.split_at(n);
        self.w.values_mut().copy_from_slice(head);
        let (head, tail) = tail.split_at(self.b.len());
        self.b.copy_from_slice(head);
        *src = tail;
    }

    pub fn value_count(&self) -> usize {
        self.w.values().len() + self.b.len()
    }

    pub fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.w.values_mut().iter_mut().for_each(&mut f);
        self.b.iter_mut().for_each(&mut f);
    }

    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        for (x, &y) in self.w.values_mut().iter_mut().zip(other.w.values()) {
            f(x, y);
        }
        for (x, &y) in self.b.iter_mut().zip(&other.b) {
            f(x, y);
        }
    }
}

/// y = Wᵀx + b.
pub fn dense_forward(params: &DenseParams, x: &[f64]) -> Result<Vec<f64>, NnError> {
    if x.len() != params.input_dim() {
        return Err(NnError::ShapeMismatch {
            context: "dense_forward",
            expected: params.input_dim().to_string(),
            got: x.len().to_string(),
        });
    }
    let mut y = params.b.clone();
    add_wt_x(&mut y, &params.w, x);
    Ok(y)
}

/// Gradients of a dense layer given dL/dy; returns (grads, dL/dx).
pub fn dense_backward(params: &DenseParams, x: &[f64], dy: &[f64]) -> (DenseParams, Vec<f64>) {
    let mut grads = DenseParams::zeros(params.input_dim(), params.output_dim());
    super::mat::add_outer(&mut grads.w, x, dy);
    grads.b.copy_from_slice(dy);
    let mut dx = vec![0.0; params.input_dim()];
    add_w_y(&mut dx, &params.w, dy);
    (grads, dx)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Dense layer followed by softmax; the classification head output.
pub fn dense_softmax_forward(params: &DenseParams, x: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(softmax(&dense_forward(params, x)?))
}

/// -ln(prob[label]) with the probability floored at `PROB_FLOOR`.
pub fn cross_entropy(prob: &[f64], label: usize) -> f64 {
    -prob[label].max(PROB_FLOOR).ln()
}

/// Combined gradient of cross-entropy(softmax(logits)) w.r.t. the logits.
pub fn softmax_cross_entropy_grad(prob: &[f64], label: usize) -> Vec<f64> {
    prob.iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - 1.0 } else { p })
        .collect()
}

/// Column-wise maximum over the rows of H (max-pooling-over-time).
pub fn max_pool_over_time(h: &Mat) -> Result<Vec<f64>, NnError> {
    Ok(max_pool_with_argmax(h)?.0)
}

/// Max-pooling keeping the earliest argmax row per column, for backprop.
pub fn max_pool_with_argmax(h: &Mat) -> Result<(Vec<f64>, Vec<usize>), NnError> {
    if h.rows() == 0 {
        return Err(NnError::EmptySequence);
    }
    let mut pooled = h.row(0).to_vec();
    let mut argmax = vec![0usize; h.cols()];
    for k in 1..h.rows() {
        for (l, &v) in h.row(k).iter().enumerate() {
            // strict comparison keeps the earliest step on ties
            if v > pooled[l] {
                pooled[l] = v;
                argmax[l] = k;
            }
        }
    }
    Ok((pooled, argmax))
}

/// Routes the upstream gradient to the argmax row of each column.
pub fn max_pool_backward(argmax: &[usize], upstream: &[f64], n_rows: usize) -> Mat {
    let mut dh = Mat::zeros(n_rows, argmax.len());
    for (l, (&k, &g)) in argmax.iter().zip(upstream).enumerate() {
        dh[(k, l)] += g;
    }
    dh
}

/// Train/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout mask: entries are 0 or 1/(1-rate), so evaluation needs
/// no rescaling. Applying the same mask is its own backward pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    factors: Vec<f64>,
}

impl DropoutMask {
    pub fn sample(len: usize, rate: f64, rng: &mut impl Rng) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidDropoutRate(rate));
        }
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Ok(DropoutMask { factors })
    }

    /// Identity mask, used in eval mode so one code path serves both modes.
    pub fn identity(len: usize) -> Self {
        DropoutMask {
            factors: vec![1.0; len],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.factors).map(|(&v, &f)| v * f).collect()
    }
}

/// Dropout as a standalone operation: zeroes entries with probability `rate`
/// in train mode (survivors scaled by 1/(1-rate)); identity in eval mode.
pub fn dropout(
    x: &[f64],
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, NnError> {
    match mode {
        Mode::Eval => {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnError::InvalidDropoutRate(rate));
            }
            Ok(x.to_vec())
        }
        Mode::Train => Ok(DropoutMask::sample(x.len(), rate, rng)?.apply(x)),
    }
}

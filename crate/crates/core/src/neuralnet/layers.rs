//! Layer kernels: forward and backward passes over `time x channel` tensors.
//!
//! Everything is generic over the float type so that the same code trains in
//! single precision and is gradient-checked in double precision.

use num_traits::Float;

use super::NetError;

/// A `len x channels` tensor stored row-major (one row per time step).
#[derive(Debug, Clone, PartialEq)]
pub struct Seq<T> {
    pub len: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Float> Seq<T> {
    pub fn new(len: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), len * channels, "tensor data does not match its shape");
        Self { len, channels, data }
    }

    pub fn zeros(len: usize, channels: usize) -> Self {
        Self::new(len, channels, vec![T::zero(); len * channels])
    }

    /// A single-channel sequence.
    pub fn column(values: Vec<T>) -> Self {
        Self::new(values.len(), 1, values)
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, t: usize, c: usize) -> T {
        self.data[t * self.channels + c]
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn conv_out_len(len: usize, width: usize, stride: usize) -> Option<usize> {
    (len >= width && width >= 1 && stride >= 1).then(|| (len - width) / stride + 1)
}

/// Valid cross-correlation. `kernel` is `filters x width x channels`.
///
/// `out[t, f] = bias[f] + sum_{w, c} input[t * stride + w, c] * kernel[f, w, c]`
pub fn conv1d_forward<T: Float>(
    input: &Seq<T>,
    kernel: &[T],
    bias: &[T],
    width: usize,
    stride: usize,
) -> Result<Seq<T>, NetError> {
    let filters = bias.len();
    let c = input.channels;
    let out_len = conv_out_len(input.len, width, stride).ok_or_else(|| {
        NetError::ShapeMismatch(format!(
            "conv1d: input length {} shorter than kernel width {width}",
            input.len
        ))
    })?;
    if kernel.len() != filters * width * c {
        return Err(NetError::ShapeMismatch(format!(
            "conv1d: kernel has {} values, expected {filters}x{width}x{c}",
            kernel.len()
        )));
    }
    let span = width * c;
    let mut out = Vec::with_capacity(out_len * filters);
    for t in 0..out_len {
        let window = &input.data[t * stride * c..t * stride * c + span];
        for f in 0..filters {
            out.push(bias[f] + dot(window, &kernel[f * span..(f + 1) * span]));
        }
    }
    Ok(Seq::new(out_len, filters, out))
}

/// Accumulates kernel and bias gradients; returns the input gradient.
pub fn conv1d_backward<T: Float>(
    input: &Seq<T>,
    kernel: &[T],
    width: usize,
    stride: usize,
    grad_out: &Seq<T>,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) -> Seq<T> {
    let c = input.channels;
    let filters = grad_out.channels;
    let span = width * c;
    let mut grad_in = Seq::zeros(input.len, c);
    for t in 0..grad_out.len {
        let base = t * stride * c;
        let window = &input.data[base..base + span];
        for f in 0..filters {
            let g = grad_out.at(t, f);
            if g == T::zero() {
                continue;
            }
            grad_bias[f] = grad_bias[f] + g;
            axpy(g, window, &mut grad_kernel[f * span..(f + 1) * span]);
            axpy(g, &kernel[f * span..(f + 1) * span], &mut grad_in.data[base..base + span]);
        }
    }
    grad_in
}

#[inline]
pub fn leaky_relu<T: Float>(x: T, alpha: T) -> T {
    if x >= T::zero() {
        x
    } else {
        alpha * x
    }
}

pub fn leaky_relu_forward<T: Float>(input: &Seq<T>, alpha: T) -> Seq<T> {
    Seq::new(
        input.len,
        input.channels,
        input.data.iter().map(|&x| leaky_relu(x, alpha)).collect(),
    )
}

pub fn leaky_relu_backward<T: Float>(input: &Seq<T>, alpha: T, grad_out: &Seq<T>) -> Seq<T> {
    Seq::new(
        input.len,
        input.channels,
        input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x >= T::zero() { g } else { alpha * g })
            .collect(),
    )
}

/// Per-channel max over windows. Ties go to the earliest index. Returns the
/// output and the flat input index chosen for every output cell.
pub fn maxpool1d_forward<T: Float>(
    input: &Seq<T>,
    width: usize,
    stride: usize,
) -> Result<(Seq<T>, Vec<usize>), NetError> {
    let c = input.channels;
    let out_len = conv_out_len(input.len, width, stride).ok_or_else(|| {
        NetError::ShapeMismatch(format!(
            "maxpool1d: input length {} shorter than window {width}",
            input.len
        ))
    })?;
    let mut out = Vec::with_capacity(out_len * c);
    let mut argmax = Vec::with_capacity(out_len * c);
    for t in 0..out_len {
        for ch in 0..c {
            let mut best = (t * stride) * c + ch;
            for w in 1..width {
                let idx = (t * stride + w) * c + ch;
                if input.data[idx] > input.data[best] {
                    best = idx;
                }
            }
            out.push(input.data[best]);
            argmax.push(best);
        }
    }
    Ok((Seq::new(out_len, c, out), argmax))
}

pub fn maxpool1d_backward<T: Float>(input: &Seq<T>, argmax: &[usize], grad_out: &Seq<T>) -> Seq<T> {
    let mut grad_in = Seq::zeros(input.len, input.channels);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        grad_in.data[idx] = grad_in.data[idx] + g;
    }
    grad_in
}

/// `W x + b` with `W` stored `units x inputs` row-major.
pub fn dense_forward<T: Float>(input: &[T], weights: &[T], bias: &[T]) -> Result<Vec<T>, NetError> {
    let units = bias.len();
    if weights.len() != units * input.len() {
        return Err(NetError::ShapeMismatch(format!(
            "dense: weights have {} values, expected {units}x{}",
            weights.len(),
            input.len()
        )));
    }
    let n = input.len();
    Ok((0..units)
        .map(|u| bias[u] + dot(&weights[u * n..(u + 1) * n], input))
        .collect())
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn dense_backward<T: Float>(
    input: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_weights: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n = input.len();
    let mut grad_in = vec![T::zero(); n];
    for (u, &g) in grad_out.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grad_bias[u] = grad_bias[u] + g;
        axpy(g, input, &mut grad_weights[u * n..(u + 1) * n]);
        axpy(g, &weights[u * n..(u + 1) * n], &mut grad_in);
    }
    grad_in
}

/// Numerically stable softmax.
pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxXent<T> {
    pub probabilities: Vec<T>,
    pub loss: T,
    pub grad_logits: Vec<T>,
}

/// Softmax with cross-entropy against `true_class`: loss `-ln p_true`,
/// gradient `p - onehot(true_class)`.
pub fn softmax_xent<T: Float>(logits: &[T], true_class: usize) -> SoftmaxXent<T> {
    let probabilities = softmax(logits);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max
        + logits
            .iter()
            .map(|&l| (l - max).exp())
            .fold(T::zero(), |a, b| a + b)
            .ln();
    let loss = lse - logits[true_class];
    let grad_logits = probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == true_class { p - T::one() } else { p })
        .collect();
    SoftmaxXent {
        probabilities,
        loss,
        grad_logits,
    }
}

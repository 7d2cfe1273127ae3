//! Central finite-difference checks of every layer's backward pass, run in
//! double precision on random small configurations.
//!
//! Each check draws a layer, an input and a random projection `r` of the
//! output, treats `sum(r * out)` as the loss and compares the analytic
//! gradient of every parameter and input against `(L(x+h) - L(x-h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, leaky_relu_backward, leaky_relu_forward,
    maxpool1d_backward, maxpool1d_forward, softmax_xent, Seq,
};
use super::lstm::{bilstm_forward, lstm_backward, LstmGrads, LstmParams};

pub const STEP: f64 = 1e-5;
/// Denominator floor so that gradients that are zero in both computations
/// do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

pub const LAYER_KINDS: [&str; 6] = ["conv1d", "dense", "maxpool1d", "leaky_relu", "bilstm", "softmax_head"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layer: &'static str,
    pub configs: usize,
    pub checked_values: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks `values` (the `which`-th buffer in `bufs`) against finite
/// differences of `loss`.
fn compare(
    bufs: &mut [Vec<f64>],
    which: usize,
    analytic: &[f64],
    loss: &dyn Fn(&[Vec<f64>]) -> f64,
    worst: &mut f64,
    count: &mut usize,
) {
    for i in 0..bufs[which].len() {
        let orig = bufs[which][i];
        bufs[which][i] = orig + STEP;
        let up = loss(bufs);
        bufs[which][i] = orig - STEP;
        let down = loss(bufs);
        bufs[which][i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        *worst = worst.max(rel_error(analytic[i], numeric));
        *count += 1;
    }
}

fn projected(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn check_conv(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let c = rng.gen_range(1..4);
    let width = rng.gen_range(1..4);
    let stride = rng.gen_range(1..3);
    let len = width + rng.gen_range(0..6);
    let filters = rng.gen_range(1..4);
    let mut bufs = vec![
        rand_vec(rng, len * c),
        rand_vec(rng, filters * width * c),
        rand_vec(rng, filters),
    ];
    let out_len = (len - width) / stride + 1;
    let r = rand_vec(rng, out_len * filters);
    let loss = |b: &[Vec<f64>]| {
        let y = conv1d_forward(&Seq::new(len, c, b[0].clone()), &b[1], &b[2], width, stride).unwrap();
        projected(&y.data, &r)
    };
    let x = Seq::new(len, c, bufs[0].clone());
    let mut gk = vec![0.0; bufs[1].len()];
    let mut gb = vec![0.0; filters];
    let gi = conv1d_backward(&x, &bufs[1], width, stride, &Seq::new(out_len, filters, r.clone()), &mut gk, &mut gb);
    compare(&mut bufs, 0, &gi.data, &loss, worst, count);
    compare(&mut bufs, 1, &gk, &loss, worst, count);
    compare(&mut bufs, 2, &gb, &loss, worst, count);
}

fn check_dense(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let n = rng.gen_range(1..8);
    let units = rng.gen_range(1..6);
    let mut bufs = vec![rand_vec(rng, n), rand_vec(rng, units * n), rand_vec(rng, units)];
    let r = rand_vec(rng, units);
    let loss = |b: &[Vec<f64>]| projected(&dense_forward(&b[0], &b[1], &b[2]).unwrap(), &r);
    let mut gw = vec![0.0; units * n];
    let mut gb = vec![0.0; units];
    let gi = dense_backward(&bufs[0], &bufs[1], &r, &mut gw, &mut gb);
    compare(&mut bufs, 0, &gi, &loss, worst, count);
    compare(&mut bufs, 1, &gw, &loss, worst, count);
    compare(&mut bufs, 2, &gb, &loss, worst, count);
}

fn check_pool(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let c = rng.gen_range(1..4);
    let width = rng.gen_range(1..4);
    let stride = rng.gen_range(1..4);
    let len = width + rng.gen_range(0..8);
    let mut bufs = vec![rand_vec(rng, len * c)];
    let x = Seq::new(len, c, bufs[0].clone());
    let (y, arg) = maxpool1d_forward(&x, width, stride).unwrap();
    let r = rand_vec(rng, y.data.len());
    let loss = |b: &[Vec<f64>]| projected(&maxpool1d_forward(&Seq::new(len, c, b[0].clone()), width, stride).unwrap().0.data, &r);
    let gi = maxpool1d_backward(&x, &arg, &Seq::new(y.len, c, r.clone()));
    compare(&mut bufs, 0, &gi.data, &loss, worst, count);
}

fn check_lrelu(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let len = rng.gen_range(1..10);
    let alpha = rng.gen_range(0.01..0.5);
    let mut bufs = vec![rand_vec(rng, len)];
    let r = rand_vec(rng, len);
    let loss = |b: &[Vec<f64>]| projected(&leaky_relu_forward(&Seq::column(b[0].clone()), alpha).data, &r);
    let gi = leaky_relu_backward(&Seq::column(bufs[0].clone()), alpha, &Seq::column(r.clone()));
    compare(&mut bufs, 0, &gi.data, &loss, worst, count);
}

fn check_bilstm(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let len = rng.gen_range(1..5);
    let c = rng.gen_range(1..4);
    let h = rng.gen_range(1..4);
    let g = 4 * h;
    let mut bufs = vec![
        rand_vec(rng, len * c),
        rand_vec(rng, g * c),
        rand_vec(rng, g * h),
        rand_vec(rng, g),
        rand_vec(rng, g * c),
        rand_vec(rng, g * h),
        rand_vec(rng, g),
    ];
    let r = rand_vec(rng, 2 * h);
    let loss = |b: &[Vec<f64>]| {
        let (y, _) = bilstm_forward(
            &Seq::new(len, c, b[0].clone()),
            LstmParams { w: &b[1], u: &b[2], b: &b[3] },
            LstmParams { w: &b[4], u: &b[5], b: &b[6] },
            h,
        )
        .unwrap();
        projected(&y, &r)
    };
    let x = Seq::new(len, c, bufs[0].clone());
    let fwd = LstmParams { w: &bufs[1], u: &bufs[2], b: &bufs[3] };
    let bwd = LstmParams { w: &bufs[4], u: &bufs[5], b: &bufs[6] };
    let (_, trace) = bilstm_forward(&x, fwd, bwd, h).unwrap();
    let mut grads: Vec<Vec<f64>> = bufs[1..].iter().map(|b| vec![0.0; b.len()]).collect();
    let mut gi = Seq::zeros(len, c);
    {
        let (f, b) = grads.split_at_mut(3);
        let [fw, fu, fb] = f else { unreachable!() };
        let [bw, bu, bb] = b else { unreachable!() };
        lstm_backward(&x, fwd, h, &trace.forward, &r[..h], LstmGrads { w: fw, u: fu, b: fb }, &mut gi);
        lstm_backward(&x, bwd, h, &trace.backward, &r[h..], LstmGrads { w: bw, u: bu, b: bb }, &mut gi);
    }
    compare(&mut bufs, 0, &gi.data, &loss, worst, count);
    for (k, gk) in grads.iter().enumerate() {
        compare(&mut bufs, k + 1, gk, &loss, worst, count);
    }
}

/// Affine map to two logits followed by softmax cross-entropy.
fn check_head(rng: &mut ChaCha8Rng, worst: &mut f64, count: &mut usize) {
    let n = rng.gen_range(1..8);
    let class = rng.gen_range(0..2);
    let mut bufs = vec![rand_vec(rng, n), rand_vec(rng, 2 * n), rand_vec(rng, 2)];
    let loss = |b: &[Vec<f64>]| softmax_xent(&dense_forward(&b[0], &b[1], &b[2]).unwrap(), class).loss;
    let logits = dense_forward(&bufs[0], &bufs[1], &bufs[2]).unwrap();
    let sx = softmax_xent(&logits, class);
    let mut gw = vec![0.0; 2 * n];
    let mut gb = vec![0.0; 2];
    let gi = dense_backward(&bufs[0], &bufs[1], &sx.grad_logits, &mut gw, &mut gb);
    compare(&mut bufs, 0, &gi, &loss, worst, count);
    compare(&mut bufs, 1, &gw, &loss, worst, count);
    compare(&mut bufs, 2, &gb, &loss, worst, count);
}

/// Runs `configs` random configurations of one layer type.
pub fn check_layer(kind: &str, configs: usize, seed: u64) -> Option<GradCheckReport> {
    let (layer, f): (&'static str, fn(&mut ChaCha8Rng, &mut f64, &mut usize)) = match kind {
        "conv1d" => ("conv1d", check_conv),
        "dense" => ("dense", check_dense),
        "maxpool1d" => ("maxpool1d", check_pool),
        "leaky_relu" => ("leaky_relu", check_lrelu),
        "bilstm" => ("bilstm", check_bilstm),
        "softmax_head" => ("softmax_head", check_head),
        _ => return None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for _ in 0..configs {
        f(&mut rng, &mut worst, &mut count);
    }
    Some(GradCheckReport {
        layer,
        configs,
        checked_values: count,
        max_rel_error: worst,
    })
}

pub fn check_all(configs: usize, seed: u64) -> Vec<GradCheckReport> {
    LAYER_KINDS
        .iter()
        .enumerate()
        .map(|(i, k)| check_layer(k, configs, seed.wrapping_add(i as u64)).expect("known layer"))
        .collect()
}

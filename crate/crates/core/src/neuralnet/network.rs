//! The two-path network over one flat parameter buffer.

use num_traits::Float;
use rand::Rng;

use super::arch::{ArchitectureConfig, LayerSpec, Plan, Shape};
use super::layers::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, leaky_relu_backward, leaky_relu_forward,
    maxpool1d_backward, maxpool1d_forward, Seq,
};
use super::lstm::{bilstm_forward, lstm_backward, BiLstmTrace, LstmGrads, LstmParams};
use super::NetError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    spec: LayerSpec,
    input: Shape,
    /// Index of the first of this layer's tensors.
    first_tensor: usize,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: ArchitectureConfig,
    seq_len: usize,
    token_count: usize,
    count_len: usize,
    path1: Vec<Stage>,
    path2: Vec<Stage>,
    path1_out: Shape,
    path2_out: Shape,
    head_tensor: usize,
    tensors: Vec<TensorInfo>,
    pub params: Vec<T>,
}

enum Cache<T> {
    Conv(Seq<T>),
    Act(Seq<T>),
    Pool(Seq<T>, Vec<usize>),
    Dense(Seq<T>),
    BiLstm(Seq<T>, BiLstmTrace<T>),
}

/// Activations recorded by [`Network::forward`].
pub struct Trace<T> {
    path1: Vec<Cache<T>>,
    path2: Vec<Cache<T>>,
    joined: Vec<T>,
    split: usize,
}

/// Gradients with respect to the two network inputs.
#[derive(Debug, Clone)]
pub struct InputGrads<T> {
    pub bytes: Vec<T>,
    pub counts: Vec<T>,
}

fn to_t<T: Float>(x: f64) -> T {
    T::from(x).expect("float conversion")
}

impl<T: Float> Network<T> {
    /// A network with every parameter zero.
    pub fn zeros(arch: &ArchitectureConfig, seq_len: usize, token_count: usize) -> Result<Self, NetError> {
        let plan = arch.plan(seq_len, token_count)?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, dims: &Vec<usize>, tensors: &mut Vec<TensorInfo>| {
            let len = dims.iter().product();
            tensors.push(TensorInfo {
                name,
                dims: dims.clone(),
                offset,
                len,
            });
            offset += len;
        };
        let mut stages = |prefix: &str, path: &super::arch::PathPlan, tensors: &mut Vec<TensorInfo>| {
            let mut out = Vec::new();
            for (i, (spec, input, params)) in path.layers.iter().enumerate() {
                let first_tensor = tensors.len();
                for (j, dims) in params.iter().enumerate() {
                    add(format!("{prefix}.{i}.{}.{}", spec.kind(), tensor_suffix(spec, j)), dims, tensors);
                }
                out.push(Stage {
                    spec: *spec,
                    input: *input,
                    first_tensor,
                });
            }
            out
        };
        let path1 = stages("path1", &plan.path1, &mut tensors);
        let path2 = stages("path2", &plan.path2, &mut tensors);
        let head_tensor = tensors.len();
        let Plan {
            head_params,
            count_len,
            path1: p1,
            path2: p2,
            ..
        } = plan;
        let mut total = tensors.last().map_or(0, |t| t.offset + t.len);
        for (j, dims) in head_params.iter().enumerate() {
            let len = dims.iter().product();
            tensors.push(TensorInfo {
                name: format!("head.{}", ["weights", "bias"][j]),
                dims: dims.clone(),
                offset: total,
                len,
            });
            total += len;
        }
        Ok(Self {
            arch: arch.clone(),
            seq_len,
            token_count,
            count_len,
            path1,
            path2,
            path1_out: p1.out,
            path2_out: p2.out,
            head_tensor,
            tensors,
            params: vec![T::zero(); total],
        })
    }

    /// He-uniform for conv and dense weights, `U(+-1/sqrt(H))` for the
    /// recurrent weights with forget bias 1, Glorot-uniform for the head.
    pub fn init(arch: &ArchitectureConfig, seq_len: usize, token_count: usize, rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut net = Self::zeros(arch, seq_len, token_count)?;
        let stages: Vec<Stage> = net.path1.iter().chain(&net.path2).cloned().collect();
        for st in &stages {
            match st.spec {
                LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. } => {
                    let w = net.tensors[st.first_tensor].clone();
                    let fan_in: usize = w.dims[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    fill_uniform(&mut net.params[w.offset..w.offset + w.len], bound, rng);
                }
                LayerSpec::BiLstm { hidden } => {
                    let bound = 1.0 / (hidden as f64).sqrt();
                    for d in 0..2 {
                        for k in 0..3 {
                            let t = net.tensors[st.first_tensor + 3 * d + k].clone();
                            let p = &mut net.params[t.offset..t.offset + t.len];
                            fill_uniform(p, bound, rng);
                            if k == 2 {
                                for b in &mut p[hidden..2 * hidden] {
                                    *b = T::one();
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        let w = net.tensors[net.head_tensor].clone();
        let bound = (6.0 / (w.dims[0] + w.dims[1]) as f64).sqrt();
        fill_uniform(&mut net.params[w.offset..w.offset + w.len], bound, rng);
        Ok(net)
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn head_weights_mut(&mut self) -> &mut [T] {
        let w = &self.tensors[self.head_tensor];
        &mut self.params[w.offset..w.offset + w.len]
    }

    /// Same graph with converted parameters.
    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            seq_len: self.seq_len,
            token_count: self.token_count,
            count_len: self.count_len,
            path1: self.path1.clone(),
            path2: self.path2.clone(),
            path1_out: self.path1_out,
            path2_out: self.path2_out,
            head_tensor: self.head_tensor,
            tensors: self.tensors.clone(),
            params: self
                .params
                .iter()
                .map(|&p| U::from(p).expect("float conversion"))
                .collect(),
        }
    }

    fn tensor(&self, idx: usize) -> &[T] {
        let t = &self.tensors[idx];
        &self.params[t.offset..t.offset + t.len]
    }

    /// Returns the two logits and the cached activations.
    pub fn forward(&self, bytes: &[T], counts: &[T]) -> Result<(Vec<T>, Trace<T>), NetError> {
        if bytes.len() != self.seq_len {
            return Err(NetError::ShapeMismatch(format!(
                "byte vector has {} values, model expects {}",
                bytes.len(),
                self.seq_len
            )));
        }
        if counts.len() != self.token_count {
            return Err(NetError::ShapeMismatch(format!(
                "count vector has {} values, model expects {}",
                counts.len(),
                self.token_count
            )));
        }
        let mut padded = counts.to_vec();
        padded.resize(self.count_len, T::zero());
        let (o1, c1) = self.run_path(&self.path1, Seq::column(bytes.to_vec()))?;
        let (o2, c2) = self.run_path(&self.path2, Seq::column(padded))?;
        let split = o1.data.len();
        let mut joined = o1.data;
        joined.extend(o2.data);
        let logits = dense_forward(&joined, self.tensor(self.head_tensor), self.tensor(self.head_tensor + 1))?;
        Ok((
            logits,
            Trace {
                path1: c1,
                path2: c2,
                joined,
                split,
            },
        ))
    }

    pub fn logits(&self, bytes: &[T], counts: &[T]) -> Result<Vec<T>, NetError> {
        self.forward(bytes, counts).map(|(l, _)| l)
    }

    fn run_path(&self, stages: &[Stage], mut x: Seq<T>) -> Result<(Seq<T>, Vec<Cache<T>>), NetError> {
        let mut caches = Vec::with_capacity(stages.len());
        for st in stages {
            let (y, cache) = match st.spec {
                LayerSpec::Conv1d { width, stride, .. } => {
                    let y = conv1d_forward(&x, self.tensor(st.first_tensor), self.tensor(st.first_tensor + 1), width, stride)?;
                    (y, Cache::Conv(x))
                }
                LayerSpec::LeakyRelu { alpha } => {
                    let y = leaky_relu_forward(&x, to_t(f64::from(alpha)));
                    (y, Cache::Act(x))
                }
                LayerSpec::MaxPool1d { width, stride } => {
                    let (y, arg) = maxpool1d_forward(&x, width, stride)?;
                    (y, Cache::Pool(x, arg))
                }
                LayerSpec::Dense { units } => {
                    let y = dense_forward(&x.data, self.tensor(st.first_tensor), self.tensor(st.first_tensor + 1))?;
                    (Seq::new(1, units, y), Cache::Dense(x))
                }
                LayerSpec::BiLstm { hidden } => {
                    let (fwd, bwd) = (self.lstm_params(st, 0), self.lstm_params(st, 1));
                    let (y, trace) = bilstm_forward(&x, fwd, bwd, hidden)?;
                    (Seq::new(1, 2 * hidden, y), Cache::BiLstm(x, trace))
                }
                LayerSpec::SoftmaxHead { .. } => {
                    return Err(NetError::InvalidConfig("softmax head inside a path".into()))
                }
            };
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    fn lstm_params(&self, st: &Stage, dir: usize) -> LstmParams<'_, T> {
        let base = st.first_tensor + 3 * dir;
        LstmParams {
            w: self.tensor(base),
            u: self.tensor(base + 1),
            b: self.tensor(base + 2),
        }
    }

    /// Accumulates parameter gradients into `grads` (same layout as
    /// `params`) and returns the input gradients.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &[T], grads: &mut [T]) -> InputGrads<T> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer has the wrong size");
        let (mut gw, gb) = self.span_mut(grads, self.head_tensor, 2);
        let g_joined = dense_backward(&trace.joined, self.tensor(self.head_tensor), grad_logits, gw.remove(0), gb);
        let (g1, g2) = g_joined.split_at(trace.split);
        let g1 = Seq::new(self.path1_out.len, self.path1_out.channels, g1.to_vec());
        let g2 = Seq::new(self.path2_out.len, self.path2_out.channels, g2.to_vec());
        let bytes = self.backprop_path(&self.path1, &trace.path1, g1, grads);
        let mut counts = self.backprop_path(&self.path2, &trace.path2, g2, grads);
        counts.truncate(self.token_count);
        InputGrads { bytes, counts }
    }

    /// Splits the mutable slices of `n` consecutive tensors starting at
    /// `first`; the last one is returned separately for convenience.
    fn span_mut<'a>(&self, grads: &'a mut [T], first: usize, n: usize) -> (Vec<&'a mut [T]>, &'a mut [T]) {
        let start = self.tensors[first].offset;
        let last = &self.tensors[first + n - 1];
        let mut rest = &mut grads[start..last.offset + last.len];
        let mut out = Vec::with_capacity(n - 1);
        for t in &self.tensors[first..first + n - 1] {
            let (a, b) = rest.split_at_mut(t.len);
            out.push(a);
            rest = b;
        }
        (out, rest)
    }

    fn backprop_path(&self, stages: &[Stage], caches: &[Cache<T>], mut g: Seq<T>, grads: &mut [T]) -> Vec<T> {
        for (st, cache) in stages.iter().zip(caches).rev() {
            g = match (st.spec, cache) {
                (LayerSpec::Conv1d { width, stride, .. }, Cache::Conv(x)) => {
                    let (mut gk, gbias) = self.span_mut(grads, st.first_tensor, 2);
                    conv1d_backward(x, self.tensor(st.first_tensor), width, stride, &g, gk.remove(0), gbias)
                }
                (LayerSpec::LeakyRelu { alpha }, Cache::Act(x)) => leaky_relu_backward(x, to_t(f64::from(alpha)), &g),
                (LayerSpec::MaxPool1d { .. }, Cache::Pool(x, arg)) => maxpool1d_backward(x, arg, &g),
                (LayerSpec::Dense { .. }, Cache::Dense(x)) => {
                    let (mut gw, gbias) = self.span_mut(grads, st.first_tensor, 2);
                    let gi = dense_backward(&x.data, self.tensor(st.first_tensor), &g.data, gw.remove(0), gbias);
                    Seq::new(x.len, x.channels, gi)
                }
                (LayerSpec::BiLstm { hidden }, Cache::BiLstm(x, trace)) => {
                    let (mut parts, bb) = self.span_mut(grads, st.first_tensor, 6);
                    let mut it = parts.drain(..);
                    let (fw, fu, fb, bw, bu) = (
                        it.next().unwrap(),
                        it.next().unwrap(),
                        it.next().unwrap(),
                        it.next().unwrap(),
                        it.next().unwrap(),
                    );
                    let mut gi = Seq::zeros(x.len, x.channels);
                    lstm_backward(
                        x,
                        self.lstm_params(st, 0),
                        hidden,
                        &trace.forward,
                        &g.data[..hidden],
                        LstmGrads { w: fw, u: fu, b: fb },
                        &mut gi,
                    );
                    lstm_backward(
                        x,
                        self.lstm_params(st, 1),
                        hidden,
                        &trace.backward,
                        &g.data[hidden..],
                        LstmGrads { w: bw, u: bu, b: bb },
                        &mut gi,
                    );
                    gi
                }
                _ => unreachable!("cache does not match its layer"),
            };
            debug_assert_eq!(g.len, st.input.len);
        }
        g.data
    }
}

fn tensor_suffix(spec: &LayerSpec, j: usize) -> &'static str {
    match spec {
        LayerSpec::BiLstm { .. } => ["fwd.w", "fwd.u", "fwd.b", "bwd.w", "bwd.u", "bwd.b"][j],
        _ => ["weights", "bias"][j],
    }
}

fn fill_uniform<T: Float>(out: &mut [T], bound: f64, rng: &mut impl Rng) {
    for v in out {
        *v = to_t(rng.gen_range(-bound..bound));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            name: "tiny".into(),
            path1: vec![
                LayerSpec::Conv1d { filters: 2, width: 3, stride: 1 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
                LayerSpec::MaxPool1d { width: 2, stride: 2 },
                LayerSpec::BiLstm { hidden: 2 },
            ],
            path2: vec![
                LayerSpec::Conv1d { filters: 2, width: 2, stride: 1 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
                LayerSpec::Dense { units: 3 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
            ],
            head: LayerSpec::SoftmaxHead { classes: 2 },
        }
    }

    fn loss(net: &Network<f64>, b: &[f64], c: &[f64]) -> f64 {
        let l = net.logits(b, c).unwrap();
        super::super::layers::softmax_xent(&l, 1).loss
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = tiny_arch();
        let mut net = Network::<f64>::init(&arch, 9, 3, &mut rng).unwrap();
        let bytes: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let counts: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (logits, trace) = net.forward(&bytes, &counts).unwrap();
        let sx = super::super::layers::softmax_xent(&logits, 1);
        let mut grads = vec![0.0; net.param_count()];
        let gin = net.backward(&trace, &sx.grad_logits, &mut grads);
        let h = 1e-5;
        for i in 0..net.param_count() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = loss(&net, &bytes, &counts);
            net.params[i] = orig - h;
            let down = loss(&net, &bytes, &counts);
            net.params[i] = orig;
            let num = (up - down) / (2.0 * h);
            let denom = num.abs().max(grads[i].abs()).max(1e-4);
            assert!((num - grads[i]).abs() / denom < 1e-4, "param {i} ({}): {num} vs {}", i, grads[i]);
        }
        for j in 0..3 {
            let mut c = counts.clone();
            c[j] += h;
            let up = loss(&net, &bytes, &c);
            c[j] -= 2.0 * h;
            let down = loss(&net, &bytes, &c);
            let num = (up - down) / (2.0 * h);
            assert!((num - gin.counts[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Network::<f64>::init(&tiny_arch(), 9, 3, &mut rng).unwrap();
        let (_, trace) = net.forward(&[0.3; 9], &[0.5; 3]).unwrap();
        let mut grads = vec![0.0; net.param_count()];
        net.backward(&trace, &[0.0, 0.0], &mut grads);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn tensor_layout_is_contiguous() {
        let net = Network::<f32>::zeros(&ArchitectureConfig::desk(), 500, 20).unwrap();
        let mut off = 0;
        for t in net.tensors() {
            assert_eq!(t.offset, off);
            assert_eq!(t.len, t.dims.iter().product::<usize>());
            off += t.len;
        }
        assert_eq!(off, net.param_count());
        assert_eq!(net.tensors().last().unwrap().name, "head.bias");
    }

    #[test]
    fn input_shape_errors() {
        let net = Network::<f32>::zeros(&ArchitectureConfig::desk(), 500, 2).unwrap();
        assert!(net.forward(&[0.0; 499], &[0.0; 2]).is_err());
        assert!(net.forward(&[0.0; 500], &[0.0; 3]).is_err());
        assert!(net.forward(&[0.0; 500], &[0.0; 2]).is_ok());
    }
}

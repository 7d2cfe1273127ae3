//! Layer descriptions, the two named presets and shape propagation.

use super::layers::conv_out_len;
use super::NetError;

/// Token count used when a parameter total has to be quoted without a
/// concrete token list.
pub const REFERENCE_TOKEN_COUNT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv1d { filters: usize, width: usize, stride: usize },
    LeakyRelu { alpha: f32 },
    MaxPool1d { width: usize, stride: usize },
    /// Flattens its input.
    Dense { units: usize },
    /// Emits the concatenated final states, `2 * hidden` values.
    BiLstm { hidden: usize },
    SoftmaxHead { classes: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BiLstm { .. } => "bilstm",
            LayerSpec::SoftmaxHead { .. } => "softmax_head",
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        let ok = match *self {
            LayerSpec::Conv1d { filters, width, stride } => filters >= 1 && width >= 1 && stride >= 1,
            LayerSpec::LeakyRelu { alpha } => alpha > 0.0 && alpha < 1.0,
            LayerSpec::MaxPool1d { width, stride } => width >= 1 && stride >= 1,
            LayerSpec::Dense { units } => units >= 1,
            LayerSpec::BiLstm { hidden } => hidden >= 1,
            LayerSpec::SoftmaxHead { classes } => classes == 2,
        };
        if ok {
            Ok(())
        } else {
            Err(NetError::InvalidConfig(format!("bad layer {self:?}")))
        }
    }

    /// Output shape and parameter tensor shapes for an input of `shape`.
    pub fn apply(&self, shape: Shape) -> Result<(Shape, Vec<Vec<usize>>), NetError> {
        self.validate()?;
        let Shape { len, channels } = shape;
        let too_short = || {
            NetError::ShapeMismatch(format!("{} cannot consume a sequence of length {len}", self.kind()))
        };
        Ok(match *self {
            LayerSpec::Conv1d { filters, width, stride } => {
                let out = conv_out_len(len, width, stride).ok_or_else(too_short)?;
                (
                    Shape::new(out, filters),
                    vec![vec![filters, width, channels], vec![filters]],
                )
            }
            LayerSpec::LeakyRelu { .. } => (shape, vec![]),
            LayerSpec::MaxPool1d { width, stride } => {
                let out = conv_out_len(len, width, stride).ok_or_else(too_short)?;
                (Shape::new(out, channels), vec![])
            }
            LayerSpec::Dense { units } => (
                Shape::new(1, units),
                vec![vec![units, len * channels], vec![units]],
            ),
            LayerSpec::BiLstm { hidden } => {
                if len == 0 {
                    return Err(too_short());
                }
                let g = 4 * hidden;
                let dir = [vec![g, channels], vec![g, hidden], vec![g]];
                let mut shapes = dir.to_vec();
                shapes.extend(dir);
                (Shape::new(1, 2 * hidden), shapes)
            }
            LayerSpec::SoftmaxHead { classes } => (
                Shape::new(1, classes),
                vec![vec![classes, len * channels], vec![classes]],
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub len: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(len: usize, channels: usize) -> Self {
        Self { len, channels }
    }

    pub fn size(&self) -> usize {
        self.len * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub name: String,
    /// Consumes the scaled byte sequence.
    pub path1: Vec<LayerSpec>,
    /// Consumes the normalized token counts as a one-channel sequence.
    pub path2: Vec<LayerSpec>,
    pub head: LayerSpec,
}

const LRELU: LayerSpec = LayerSpec::LeakyRelu { alpha: 0.01 };

fn conv(filters: usize, width: usize) -> LayerSpec {
    LayerSpec::Conv1d { filters, width, stride: 1 }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool1d { width: 2, stride: 2 }
}

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

/// Eight conv/activation/pool layers, then the recurrent layer.
fn byte_path(f: [usize; 3], hidden: usize) -> Vec<LayerSpec> {
    vec![
        conv(f[0], 5),
        LRELU,
        pool(),
        conv(f[1], 5),
        LRELU,
        pool(),
        conv(f[2], 3),
        LRELU,
        LayerSpec::BiLstm { hidden },
    ]
}

/// Nine conv/activation/pool/dense layers.
fn count_path(filters: usize, units: [usize; 3]) -> Vec<LayerSpec> {
    vec![
        conv(filters, 3),
        LRELU,
        pool(),
        dense(units[0]),
        LRELU,
        dense(units[1]),
        LRELU,
        dense(units[2]),
        LRELU,
    ]
}

impl ArchitectureConfig {
    pub const PRESETS: [&'static str; 2] = ["desk", "paper-scale"];

    /// Small enough to train on a laptop in minutes.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            path1: byte_path([8, 8, 16], 16),
            path2: count_path(8, [32, 32, 16]),
            head: LayerSpec::SoftmaxHead { classes: 2 },
        }
    }

    /// Same structure scaled to roughly five million parameters.
    pub fn paper_scale() -> Self {
        Self {
            name: "paper-scale".into(),
            path1: byte_path([64, 128, 256], 256),
            path2: count_path(48, [512, 512, 256]),
            head: LayerSpec::SoftmaxHead { classes: 2 },
        }
    }

    pub fn preset(name: &str) -> Result<Self, NetError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(NetError::InvalidConfig(format!(
                "unknown preset {other:?} (known: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Smallest count-path input length, at least `token_count`, that
    /// chains through path 2. Shorter count vectors are zero-padded.
    pub fn count_input_len(&self, token_count: usize) -> Result<usize, NetError> {
        let start = token_count.max(1);
        for n in start..start + 4096 {
            if chain(&self.path2, Shape::new(n, 1)).is_ok() {
                return Ok(n);
            }
        }
        Err(NetError::ShapeMismatch("path 2 accepts no input length".into()))
    }

    /// Resolves every layer's input shape and parameter shapes.
    pub fn plan(&self, seq_len: usize, token_count: usize) -> Result<Plan, NetError> {
        if self.path1.is_empty() || self.path2.is_empty() {
            return Err(NetError::InvalidConfig("both paths need at least one layer".into()));
        }
        if !matches!(self.head, LayerSpec::SoftmaxHead { .. }) {
            return Err(NetError::InvalidConfig("head must be a softmax head".into()));
        }
        let count_len = self.count_input_len(token_count)?;
        let path1 = chain(&self.path1, Shape::new(seq_len, 1))?;
        let path2 = chain(&self.path2, Shape::new(count_len, 1))?;
        let joined = path1.out.size() + path2.out.size();
        let (_, head_params) = self.head.apply(Shape::new(1, joined))?;
        Ok(Plan {
            seq_len,
            count_len,
            path1,
            path2,
            head_params,
        })
    }

    pub fn param_count(&self, seq_len: usize, token_count: usize) -> Result<usize, NetError> {
        self.plan(seq_len, token_count).map(|p| p.param_count())
    }
}

#[derive(Debug, Clone)]
pub struct PathPlan {
    pub layers: Vec<(LayerSpec, Shape, Vec<Vec<usize>>)>,
    pub out: Shape,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub seq_len: usize,
    pub count_len: usize,
    pub path1: PathPlan,
    pub path2: PathPlan,
    pub head_params: Vec<Vec<usize>>,
}

impl Plan {
    pub fn param_count(&self) -> usize {
        let size = |dims: &Vec<usize>| dims.iter().product::<usize>();
        self.path1
            .layers
            .iter()
            .chain(&self.path2.layers)
            .flat_map(|(_, _, p)| p.iter())
            .chain(&self.head_params)
            .map(size)
            .sum()
    }
}

fn chain(layers: &[LayerSpec], input: Shape) -> Result<PathPlan, NetError> {
    let mut shape = input;
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        if matches!(layer, LayerSpec::SoftmaxHead { .. }) {
            return Err(NetError::InvalidConfig("softmax head inside a path".into()));
        }
        let (next, params) = layer.apply(shape)?;
        out.push((*layer, shape, params));
        shape = next;
    }
    Ok(PathPlan { layers: out, out: shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DEFAULT_SEQ_LEN;

    #[test]
    fn layer_counts_match_structure() {
        for arch in [ArchitectureConfig::desk(), ArchitectureConfig::paper_scale()] {
            let (rnn, cnn): (Vec<&LayerSpec>, Vec<&LayerSpec>) = arch
                .path1
                .iter()
                .partition(|l| matches!(l, LayerSpec::BiLstm { .. }));
            assert_eq!(cnn.len(), 8);
            assert_eq!(rnn.len(), 1);
            assert_eq!(arch.path2.len(), 9);
        }
    }

    #[test]
    fn desk_count_by_hand() {
        // path1: 48 + 328 + 400 + 2 * (4*16*16 + 4*16*16 + 64)
        // path2 (K = 256): conv 32, 127*8 -> 32, 32 -> 32, 32 -> 16
        // head: 48 -> 2
        let p1 = 48 + 328 + 400 + 2 * (1024 + 1024 + 64);
        let p2 = 32 + (1016 * 32 + 32) + (32 * 32 + 32) + (32 * 16 + 16);
        let head = 48 * 2 + 2;
        let got = ArchitectureConfig::desk()
            .param_count(DEFAULT_SEQ_LEN, REFERENCE_TOKEN_COUNT)
            .unwrap();
        assert_eq!(got, p1 + p2 + head);
        assert!((30_000..70_000).contains(&got));
    }

    #[test]
    fn paper_scale_near_five_million() {
        let n = ArchitectureConfig::paper_scale()
            .param_count(DEFAULT_SEQ_LEN, REFERENCE_TOKEN_COUNT)
            .unwrap();
        assert!((4_000_000..=6_000_000).contains(&n), "{n}");
    }

    #[test]
    fn short_count_vectors_are_padded() {
        let arch = ArchitectureConfig::desk();
        assert_eq!(arch.count_input_len(0).unwrap(), 4);
        assert_eq!(arch.count_input_len(3).unwrap(), 4);
        assert_eq!(arch.count_input_len(40).unwrap(), 40);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut arch = ArchitectureConfig::desk();
        assert!(arch.plan(10, 5).is_err());
        arch.path1[1] = LayerSpec::LeakyRelu { alpha: 1.5 };
        assert!(matches!(arch.plan(500, 5), Err(NetError::InvalidConfig(_))));
        assert!(ArchitectureConfig::preset("huge").is_err());
    }
}

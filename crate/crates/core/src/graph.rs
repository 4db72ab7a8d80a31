//! Shape-level model description shared by the inference engine and the cost
//! model.
//!
//! A [`ModelGraph`] is an ordered list of [`Node`]s. Each node reads the
//! output of its [`Src`] (by default the previous node) and declares its
//! per-sample input and output shapes. Nodes can be grouped into a
//! mixture-of-experts unit, and a whole graph can be wrapped as the replica of
//! a cluster model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithmeticMode {
    Exact,
    Approximate,
}

/// Where a node reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Src {
    Prev,
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        c_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    /// Applied to the last axis; leading axes are tokens.
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
    },
    LayerNorm {
        features: usize,
    },
    Relu,
    Gelu,
    Softmax,
    ResidualAdd {
        skip: Src,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    /// `[C, H, W]` patch grid to `[H*W (+1), C]` tokens plus a learned
    /// position embedding.
    PatchTokens {
        class_token: bool,
    },
    /// `[T, F]` to the first token `[F]`.
    ClassToken,
    /// Multi-head self-attention core: `[T, 3F]` packed q/k/v to `[T, F]`.
    /// `approx_matmuls` routes the score and value products through the
    /// multiplier; otherwise they run in exact float and cost no MACs.
    Attention {
        heads: usize,
        approx_matmuls: bool,
    },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::LayerNorm { .. } => "layernorm",
            LayerKind::Relu => "relu",
            LayerKind::Gelu => "gelu",
            LayerKind::Softmax => "softmax",
            LayerKind::ResidualAdd { .. } => "residual_add",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "global_avgpool",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::PatchTokens { .. } => "patch_tokens",
            LayerKind::ClassToken => "class_token",
            LayerKind::Attention { .. } => "attention",
        }
    }

    pub fn may_approximate(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// Per-sample output shape for `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        use LayerKind::*;
        let need_rank = |r: usize| -> Result<()> {
            if input.len() != r {
                bail!(Shape, "{} expects a rank-{r} input, got {input:?}", self.tag());
            }
            Ok(())
        };
        Ok(match *self {
            Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                padding,
                groups,
                ..
            } => {
                need_rank(3)?;
                if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                    bail!(Shape, "conv2d groups {groups} must divide {c_in} and {c_out}");
                }
                if input[0] != c_in {
                    bail!(Shape, "conv2d expects {c_in} input channels, got {input:?}");
                }
                if stride == 0 || k_h == 0 || k_w == 0 {
                    bail!(Shape, "conv2d kernel and stride must be positive");
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < k_h || w < k_w {
                    bail!(Shape, "conv2d kernel {k_h}x{k_w} larger than padded input {h}x{w}");
                }
                vec![c_out, (h - k_h) / stride + 1, (w - k_w) / stride + 1]
            }
            Linear {
                in_features,
                out_features,
                ..
            } => {
                if input.last() != Some(&in_features) {
                    bail!(Shape, "linear expects last axis {in_features}, got {input:?}");
                }
                let mut out = input.to_vec();
                *out.last_mut().expect("non-empty") = out_features;
                out
            }
            BatchNorm2d { channels } => {
                need_rank(3)?;
                if input[0] != channels {
                    bail!(Shape, "batchnorm2d expects {channels} channels, got {input:?}");
                }
                input.to_vec()
            }
            LayerNorm { features } => {
                if input.last() != Some(&features) {
                    bail!(Shape, "layernorm expects last axis {features}, got {input:?}");
                }
                input.to_vec()
            }
            Relu | Gelu | Softmax | ResidualAdd { .. } => {
                if input.is_empty() {
                    bail!(Shape, "{} needs a non-scalar input", self.tag());
                }
                input.to_vec()
            }
            AvgPool { k, stride } | MaxPool { k, stride } => {
                need_rank(3)?;
                if k == 0 || stride == 0 || input[1] < k || input[2] < k {
                    bail!(Shape, "pool {k}/{stride} does not fit {input:?}");
                }
                vec![input[0], (input[1] - k) / stride + 1, (input[2] - k) / stride + 1]
            }
            GlobalAvgPool => {
                need_rank(3)?;
                vec![input[0]]
            }
            Flatten => vec![input.iter().product()],
            PatchTokens { class_token } => {
                need_rank(3)?;
                vec![input[1] * input[2] + class_token as usize, input[0]]
            }
            ClassToken => {
                need_rank(2)?;
                vec![input[1]]
            }
            Attention { heads, .. } => {
                need_rank(2)?;
                if !input[1].is_multiple_of(3) || heads == 0 || !(input[1] / 3).is_multiple_of(heads) {
                    bail!(Shape, "attention with {heads} heads cannot split {input:?}");
                }
                vec![input[0], input[1] / 3]
            }
        })
    }

    /// Multiply-accumulates for one sample (conv and linear only, plus the
    /// attention products when they are approximated).
    pub fn macs(&self, input: &[usize], output: &[usize]) -> u64 {
        match *self {
            LayerKind::Conv2d {
                c_in, k_h, k_w, groups, ..
            } => {
                let (c_out, h_out, w_out) = (output[0], output[1], output[2]);
                (c_out * h_out * w_out * (c_in / groups) * k_h * k_w) as u64
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                let tokens: usize = input[..input.len() - 1].iter().product();
                (tokens * in_features * out_features) as u64
            }
            LayerKind::Attention {
                approx_matmuls: true,
                ..
            } => {
                // q.k^T and attn.v over all heads
                let (t, f) = (output[0], output[1]);
                (2 * t * t * f) as u64
            }
            _ => 0,
        }
    }

    /// Trainable parameter count.
    pub fn params(&self, input: &[usize], output: &[usize]) -> u64 {
        (match *self {
            LayerKind::Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                groups,
                bias,
                ..
            } => c_out * (c_in / groups) * k_h * k_w + if bias { c_out } else { 0 },
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => in_features * out_features + if bias { out_features } else { 0 },
            LayerKind::BatchNorm2d { channels } => 2 * channels,
            LayerKind::LayerNorm { features } => 2 * features,
            LayerKind::PatchTokens { class_token } => {
                let _ = input;
                output[0] * output[1] + if class_token { output[1] } else { 0 }
            }
            _ => 0,
        }) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub mode: ArithmeticMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub src: Src,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// Mixture-of-experts group this node is an expert layer of.
    pub group: Option<usize>,
    /// Substitution unit this node belongs to (candidate for MoE conversion).
    pub unit: Option<usize>,
}

impl Node {
    pub fn macs(&self) -> u64 {
        self.spec.kind.macs(&self.input, &self.output)
    }

    pub fn params(&self) -> u64 {
        self.spec.kind.params(&self.input, &self.output)
    }

    pub fn is_approximate(&self) -> bool {
        self.spec.mode == ArithmeticMode::Approximate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Hard,
    Soft,
    Cluster,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dense, Variant::Hard, Variant::Soft, Variant::Cluster];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Hard => "hard",
            Variant::Soft => "soft",
            Variant::Cluster => "cluster",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Variant::Dense,
            "hard" => Variant::Hard,
            "soft" => Variant::Soft,
            "cluster" => Variant::Cluster,
            other => bail!(Param, "unknown variant {other:?} (expected dense, hard, soft or cluster)"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerSample,
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeGroup {
    pub experts: usize,
    pub routing: Routing,
    pub granularity: Granularity,
    /// Router input width.
    pub router_in: usize,
    /// Routed units per sample (1, or the token count).
    pub units: usize,
}

impl MoeGroup {
    /// Router MACs per sample. A single expert needs no router.
    pub fn router_macs(&self) -> u64 {
        if self.experts <= 1 {
            0
        } else {
            (self.units * self.router_in * self.experts) as u64
        }
    }

    pub fn router_params(&self) -> u64 {
        if self.experts <= 1 {
            0
        } else {
            (self.router_in * self.experts) as u64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gateway {
    /// Gateway known only by its per-inference MAC cost.
    Budget { macs: u64 },
    /// Executable gateway network producing one logit per expert.
    Network { graph: Box<ModelGraph> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub experts: usize,
    pub gateway: Gateway,
    /// Arithmetic of the gateway body; its routing head is exact.
    pub gateway_mode: ArithmeticMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub family: Family,
    pub variant: Variant,
    pub input: Vec<usize>,
    pub classes: usize,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub groups: Vec<MoeGroup>,
    #[serde(default)]
    pub cluster: Option<ClusterSpec>,
}

/// Shape-only architecture description; the cost model's view of a graph.
pub type ArchSpec = ModelGraph;

impl ModelGraph {
    pub fn new(name: impl Into<String>, family: Family, input: Vec<usize>, classes: usize) -> Self {
        Self {
            name: name.into(),
            family,
            variant: Variant::Dense,
            input,
            classes,
            nodes: Vec::new(),
            groups: Vec::new(),
            cluster: None,
        }
    }

    /// Output shape of the node `src` refers to, as seen from node `at`.
    pub fn src_shape(&self, at: usize, src: Src) -> Result<&[usize]> {
        match src {
            Src::Input => Ok(&self.input),
            Src::Prev if at == 0 => Ok(&self.input),
            Src::Prev => Ok(&self.nodes[at - 1].output),
            Src::Node(i) if i < at => Ok(&self.nodes[i].output),
            Src::Node(i) => bail!(Shape, "node {at} reads from later node {i}"),
        }
    }

    /// Resolve `src` relative to node `at` into a node index (None = graph input).
    pub fn resolve(&self, at: usize, src: Src) -> Option<usize> {
        match src {
            Src::Input => None,
            Src::Prev if at == 0 => None,
            Src::Prev => Some(at - 1),
            Src::Node(i) => Some(i),
        }
    }

    /// Append a node reading from `src`, inferring its output shape.
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, mode: ArithmeticMode, src: Src) -> Result<usize> {
        let at = self.nodes.len();
        let input = self.src_shape(at, src)?.to_vec();
        let output = kind.output_shape(&input)?;
        self.nodes.push(Node {
            name: name.into(),
            spec: LayerSpec { kind, mode },
            src,
            input,
            output,
            group: None,
            unit: None,
        });
        Ok(at)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.nodes.last().map(|n| n.output.as_slice()).unwrap_or(&self.input)
    }

    /// Check shape consistency, arithmetic-mode rules and group structure.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            bail!(Shape, "graph {} has no layers", self.name);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let input = self.src_shape(i, node.src)?;
            if input != node.input.as_slice() {
                bail!(
                    Shape,
                    "node {i} ({}) declares input {:?} but its source produces {input:?}",
                    node.name,
                    node.input
                );
            }
            let out = node.spec.kind.output_shape(&node.input)?;
            if out != node.output {
                bail!(Shape, "node {i} ({}) declares output {:?}, expected {out:?}", node.name, node.output);
            }
            if let LayerKind::ResidualAdd { skip } = node.spec.kind {
                if self.src_shape(i, skip)? != node.input.as_slice() {
                    bail!(Shape, "residual add {} joins mismatched shapes", node.name);
                }
            }
            if node.is_approximate() && !node.spec.kind.may_approximate() {
                bail!(Param, "node {} ({}) cannot be approximate", node.name, node.spec.kind.tag());
            }
            if let Some(g) = node.group {
                if g >= self.groups.len() {
                    bail!(Param, "node {} refers to missing group {g}", node.name);
                }
            }
        }
        if self.output_shape() != [self.classes] {
            bail!(Shape, "graph {} ends in {:?}, expected [{}]", self.name, self.output_shape(), self.classes);
        }
        for (g, group) in self.groups.iter().enumerate() {
            let members: Vec<usize> = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.group == Some(g))
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() || group.experts == 0 {
                bail!(Param, "group {g} is empty");
            }
            if members.windows(2).any(|w| w[1] != w[0] + 1) {
                bail!(Param, "group {g} is not contiguous");
            }
            for &m in &members[1..] {
                if self.nodes[m].src != Src::Prev {
                    bail!(Param, "group {g} member {} must read from its predecessor", self.nodes[m].name);
                }
            }
            // nodes outside the group may only read the group's last output
            let (first, last) = (members[0], *members.last().expect("non-empty"));
            for (i, n) in self.nodes.iter().enumerate().skip(last + 1) {
                let mut srcs = vec![n.src];
                if let LayerKind::ResidualAdd { skip } = n.spec.kind {
                    srcs.push(skip);
                }
                for s in srcs {
                    if let Some(j) = self.resolve(i, s) {
                        if (first..last).contains(&j) {
                            bail!(Param, "node {} reads from inside expert group {g}", n.name);
                        }
                    }
                }
            }
        }
        if let Some(c) = &self.cluster {
            if c.experts == 0 {
                bail!(Param, "cluster needs at least one expert");
            }
            if let Gateway::Network { graph } = &c.gateway {
                graph.validate()?;
                if graph.input != self.input || graph.classes != c.experts {
                    bail!(Shape, "gateway must map {:?} to {} logits", self.input, c.experts);
                }
            }
        }
        Ok(())
    }

    /// Number of substitution units marked on the graph.
    pub fn unit_count(&self) -> usize {
        self.nodes.iter().filter_map(|n| n.unit).max().map_or(0, |u| u + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ArithmeticMode::*;

    #[test]
    fn conv_output_size() {
        let k = LayerKind::Conv2d {
            c_in: 3,
            c_out: 16,
            k_h: 3,
            k_w: 3,
            stride: 1,
            padding: 1,
            groups: 1,
            bias: false,
        };
        let out = k.output_shape(&[3, 32, 32]).unwrap();
        assert_eq!(out, vec![16, 32, 32]);
        assert_eq!(k.macs(&[3, 32, 32], &out), 442_368);
        assert!(k.output_shape(&[4, 32, 32]).is_err());
        let s2 = LayerKind::Conv2d {
            c_in: 16,
            c_out: 32,
            k_h: 3,
            k_w: 3,
            stride: 2,
            padding: 1,
            groups: 1,
            bias: false,
        };
        assert_eq!(s2.output_shape(&[16, 32, 32]).unwrap(), vec![32, 16, 16]);
    }

    #[test]
    fn grouped_conv_macs() {
        let k = LayerKind::Conv2d {
            c_in: 8,
            c_out: 8,
            k_h: 3,
            k_w: 3,
            stride: 1,
            padding: 1,
            groups: 8,
            bias: false,
        };
        let out = k.output_shape(&[8, 4, 4]).unwrap();
        assert_eq!(k.macs(&[8, 4, 4], &out), 8 * 16 * 9);
    }

    #[test]
    fn linear_over_tokens() {
        let k = LayerKind::Linear {
            in_features: 384,
            out_features: 1536,
            bias: true,
        };
        let out = k.output_shape(&[197, 384]).unwrap();
        assert_eq!(out, vec![197, 1536]);
        assert_eq!(k.macs(&[197, 384], &out), 197 * 384 * 1536);
    }

    #[test]
    fn validation_catches_bad_modes_and_shapes() {
        let mut g = ModelGraph::new("t", Family::Mlp, vec![4], 2);
        g.push("fc", LayerKind::Linear { in_features: 4, out_features: 2, bias: true }, Approximate, Src::Prev)
            .unwrap();
        g.validate().unwrap();
        g.nodes[0].spec.mode = Exact;
        g.push("act", LayerKind::Relu, Approximate, Src::Prev).unwrap();
        assert!(matches!(g.validate(), Err(Error::Param(_))));
        g.nodes[1].spec.mode = Exact;
        g.validate().unwrap();
        g.nodes[1].input = vec![3];
        assert!(matches!(g.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("Soft".parse::<Variant>().unwrap(), Variant::Soft);
        assert!(matches!("topk".parse::<Variant>(), Err(Error::Param(_))));
    }
}

//! Shape-level builders for the reference architectures and the desk-scale
//! toy models.
//!
//! Arithmetic modes follow the approximation scope of each family: CNNs run
//! every `Conv2d` through the multiplier and keep linear layers exact;
//! transformers approximate the linear layers inside the blocks and keep the
//! patch embedding and classifier head exact; the toy MLP approximates its
//! hidden linear layer and keeps the head exact.

use crate::error::{bail, Result};
use crate::graph::{
    ArithmeticMode::{self, Approximate, Exact},
    Family, Gateway, LayerKind, ModelGraph, Src,
};

/// Gateway cost used for CNN cluster models, in MACs.
pub const CNN_GATEWAY_MACS: u64 = 125_800_000;
/// Gateway cost used for transformer cluster models, in MACs.
pub const VIT_GATEWAY_MACS: u64 = 4_140_000_000;

pub const ARCH_NAMES: [&str; 6] = ["resnet20", "vgg11_bn", "vgg19_bn", "vit_small_spec", "toy_cnn", "toy_mlp"];

fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, bias: bool) -> LayerKind {
    LayerKind::Conv2d {
        c_in,
        c_out,
        k_h: k,
        k_w: k,
        stride,
        padding,
        groups: 1,
        bias,
    }
}

fn linear(in_features: usize, out_features: usize) -> LayerKind {
    LayerKind::Linear {
        in_features,
        out_features,
        bias: true,
    }
}

/// Build an architecture by name. `input` overrides the per-sample input
/// shape of the toy models (defaults: `[3, 16, 16]`).
pub fn build(name: &str, classes: Option<usize>, input: Option<Vec<usize>>) -> Result<ModelGraph> {
    match name {
        "resnet20" => resnet20(classes.unwrap_or(100)),
        "vgg11_bn" => vgg_bn(11, classes.unwrap_or(100)),
        "vgg19_bn" => vgg_bn(19, classes.unwrap_or(100)),
        "vit_small_spec" => vit(&VitConfig {
            classes: classes.unwrap_or(200),
            ..VitConfig::small()
        }),
        "toy_cnn" => toy_cnn(input.unwrap_or_else(|| vec![3, 16, 16]), classes.unwrap_or(10)),
        "toy_mlp" => toy_mlp(input.unwrap_or_else(|| vec![3, 16, 16]), 32, classes.unwrap_or(10)),
        other => bail!(Param, "unknown architecture {other:?}; known: {}", ARCH_NAMES.join(", ")),
    }
}

/// CIFAR ResNet-20: 3x3 stem, three stages of three basic blocks (16, 32, 64
/// channels) with 1x1 projection shortcuts on the downsampling blocks, global
/// pooling and a linear classifier. The block convolutions are the MoE
/// substitution units; the shortcuts stay shared.
pub fn resnet20(classes: usize) -> Result<ModelGraph> {
    let mut g = ModelGraph::new("resnet20", Family::Cnn, vec![3, 32, 32], classes);
    g.push("stem.conv", conv(3, 16, 3, 1, 1, false), Approximate, Src::Prev)?;
    g.push("stem.bn", LayerKind::BatchNorm2d { channels: 16 }, Exact, Src::Prev)?;
    g.push("stem.relu", LayerKind::Relu, Exact, Src::Prev)?;
    let mut unit = 0;
    let mut c_prev = 16;
    for stage in 0..3 {
        let ch = 16 << stage;
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("s{}.b{block}", stage + 1);
            let block_in = g.nodes.len() - 1;
            let c1 = g.push(format!("{p}.conv1"), conv(c_prev, ch, 3, stride, 1, false), Approximate, Src::Prev)?;
            g.nodes[c1].unit = Some(unit);
            unit += 1;
            g.push(format!("{p}.bn1"), LayerKind::BatchNorm2d { channels: ch }, Exact, Src::Prev)?;
            g.push(format!("{p}.relu1"), LayerKind::Relu, Exact, Src::Prev)?;
            let c2 = g.push(format!("{p}.conv2"), conv(ch, ch, 3, 1, 1, false), Approximate, Src::Prev)?;
            g.nodes[c2].unit = Some(unit);
            unit += 1;
            let bn2 = g.push(format!("{p}.bn2"), LayerKind::BatchNorm2d { channels: ch }, Exact, Src::Prev)?;
            if stride != 1 || c_prev != ch {
                g.push(format!("{p}.down.conv"), conv(c_prev, ch, 1, stride, 0, false), Approximate, Src::Node(block_in))?;
                g.push(format!("{p}.down.bn"), LayerKind::BatchNorm2d { channels: ch }, Exact, Src::Prev)?;
                g.push(format!("{p}.add"), LayerKind::ResidualAdd { skip: Src::Prev }, Exact, Src::Node(bn2))?;
            } else {
                g.push(format!("{p}.add"), LayerKind::ResidualAdd { skip: Src::Node(block_in) }, Exact, Src::Prev)?;
            }
            g.push(format!("{p}.relu2"), LayerKind::Relu, Exact, Src::Prev)?;
            c_prev = ch;
        }
    }
    g.push("pool", LayerKind::GlobalAvgPool, Exact, Src::Prev)?;
    g.push("fc", linear(64, classes), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

/// CIFAR VGG with batch norm (configurations A = 11, E = 19) and the
/// 512-512-classes classifier. Every convolution except the first is an MoE
/// substitution unit.
pub fn vgg_bn(depth: usize, classes: usize) -> Result<ModelGraph> {
    const M: usize = 0;
    let cfg: &[usize] = match depth {
        11 => &[64, M, 128, M, 256, 256, M, 512, 512, M, 512, 512, M],
        19 => &[
            64, 64, M, 128, 128, M, 256, 256, 256, 256, M, 512, 512, 512, 512, M, 512, 512, 512, 512, M,
        ],
        other => bail!(Param, "unsupported VGG depth {other}"),
    };
    let mut g = ModelGraph::new(format!("vgg{depth}_bn"), Family::Cnn, vec![3, 32, 32], classes);
    let mut c_prev = 3;
    let (mut conv_idx, mut pool_idx, mut unit) = (0, 0, 0);
    for &c in cfg {
        if c == M {
            g.push(format!("pool{pool_idx}"), LayerKind::MaxPool { k: 2, stride: 2 }, Exact, Src::Prev)?;
            pool_idx += 1;
            continue;
        }
        let n = g.push(format!("conv{conv_idx}"), conv(c_prev, c, 3, 1, 1, true), Approximate, Src::Prev)?;
        if conv_idx > 0 {
            g.nodes[n].unit = Some(unit);
            unit += 1;
        }
        g.push(format!("bn{conv_idx}"), LayerKind::BatchNorm2d { channels: c }, Exact, Src::Prev)?;
        g.push(format!("relu{conv_idx}"), LayerKind::Relu, Exact, Src::Prev)?;
        conv_idx += 1;
        c_prev = c;
    }
    g.push("flatten", LayerKind::Flatten, Exact, Src::Prev)?;
    g.push("fc1", linear(512, 512), Exact, Src::Prev)?;
    g.push("fc1.relu", LayerKind::Relu, Exact, Src::Prev)?;
    g.push("fc2", linear(512, 512), Exact, Src::Prev)?;
    g.push("fc2.relu", LayerKind::Relu, Exact, Src::Prev)?;
    g.push("fc3", linear(512, classes), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp: usize,
    pub classes: usize,
    /// Route attention score/value products through the multiplier.
    pub approx_attention_matmuls: bool,
}

impl VitConfig {
    /// ViT-Small/16 at 224x224 (197 tokens).
    pub fn small() -> Self {
        Self {
            image: 224,
            patch: 16,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp: 1536,
            classes: 200,
            approx_attention_matmuls: false,
        }
    }
}

/// Pre-norm vision transformer. Each block's FFN (fc1, GELU, fc2) is one MoE
/// substitution unit.
pub fn vit(cfg: &VitConfig) -> Result<ModelGraph> {
    let d = cfg.dim;
    let small = VitConfig {
        classes: cfg.classes,
        ..VitConfig::small()
    };
    let name = if *cfg == small { "vit_small_spec".to_string() } else { format!("vit_d{}x{}", d, cfg.depth) };
    let mut g = ModelGraph::new(name, Family::Transformer, vec![3, cfg.image, cfg.image], cfg.classes);
    g.push("patch_embed", conv(3, d, cfg.patch, cfg.patch, 0, true), Exact, Src::Prev)?;
    g.push("tokens", LayerKind::PatchTokens { class_token: true }, Exact, Src::Prev)?;
    for b in 0..cfg.depth {
        let p = format!("blk{b}");
        let blk_in = g.nodes.len() - 1;
        g.push(format!("{p}.norm1"), LayerKind::LayerNorm { features: d }, Exact, Src::Prev)?;
        g.push(format!("{p}.qkv"), linear(d, 3 * d), Approximate, Src::Prev)?;
        g.push(
            format!("{p}.attn"),
            LayerKind::Attention {
                heads: cfg.heads,
                approx_matmuls: cfg.approx_attention_matmuls,
            },
            Exact,
            Src::Prev,
        )?;
        g.push(format!("{p}.proj"), linear(d, d), Approximate, Src::Prev)?;
        let mid = g.push(format!("{p}.add1"), LayerKind::ResidualAdd { skip: Src::Node(blk_in) }, Exact, Src::Prev)?;
        g.push(format!("{p}.norm2"), LayerKind::LayerNorm { features: d }, Exact, Src::Prev)?;
        let f1 = g.push(format!("{p}.fc1"), linear(d, cfg.mlp), Approximate, Src::Prev)?;
        let ge = g.push(format!("{p}.gelu"), LayerKind::Gelu, Exact, Src::Prev)?;
        let f2 = g.push(format!("{p}.fc2"), linear(cfg.mlp, d), Approximate, Src::Prev)?;
        for n in [f1, ge, f2] {
            g.nodes[n].unit = Some(b);
        }
        g.push(format!("{p}.add2"), LayerKind::ResidualAdd { skip: Src::Node(mid) }, Exact, Src::Prev)?;
    }
    g.push("norm", LayerKind::LayerNorm { features: d }, Exact, Src::Prev)?;
    g.push("cls", LayerKind::ClassToken, Exact, Src::Prev)?;
    g.push("head", linear(d, cfg.classes), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

/// Three-conv toy CNN; the two deeper convolutions are substitution units.
pub fn toy_cnn(input: Vec<usize>, classes: usize) -> Result<ModelGraph> {
    if input.len() != 3 {
        bail!(Shape, "toy_cnn needs a [C, H, W] input, got {input:?}");
    }
    let c = input[0];
    let mut g = ModelGraph::new("toy_cnn", Family::Cnn, input, classes);
    g.push("conv1", conv(c, 8, 3, 1, 1, true), Approximate, Src::Prev)?;
    g.push("relu1", LayerKind::Relu, Exact, Src::Prev)?;
    let c2 = g.push("conv2", conv(8, 16, 3, 2, 1, true), Approximate, Src::Prev)?;
    g.nodes[c2].unit = Some(0);
    g.push("relu2", LayerKind::Relu, Exact, Src::Prev)?;
    let c3 = g.push("conv3", conv(16, 16, 3, 1, 1, true), Approximate, Src::Prev)?;
    g.nodes[c3].unit = Some(1);
    g.push("relu3", LayerKind::Relu, Exact, Src::Prev)?;
    g.push("pool", LayerKind::GlobalAvgPool, Exact, Src::Prev)?;
    g.push("fc", linear(16, classes), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

/// Flatten, one approximate hidden layer (the substitution unit), ReLU, exact
/// head.
pub fn toy_mlp(input: Vec<usize>, hidden: usize, classes: usize) -> Result<ModelGraph> {
    let features: usize = input.iter().product();
    let mut g = ModelGraph::new("toy_mlp", Family::Mlp, input, classes);
    g.push("flatten", LayerKind::Flatten, Exact, Src::Prev)?;
    let h = g.push("hidden", linear(features, hidden), Approximate, Src::Prev)?;
    g.nodes[h].unit = Some(0);
    g.push("relu", LayerKind::Relu, Exact, Src::Prev)?;
    g.push("head", linear(hidden, classes), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

/// Small exact gateway network mapping an input sample to `experts` logits.
pub fn toy_gateway(input: Vec<usize>, experts: usize) -> Result<ModelGraph> {
    let features: usize = input.iter().product();
    let mut g = ModelGraph::new("gateway", Family::Mlp, input, experts);
    g.push("flatten", LayerKind::Flatten, Exact, Src::Prev)?;
    g.push("fc1", linear(features, 16), Exact, Src::Prev)?;
    g.push("relu", LayerKind::Relu, Exact, Src::Prev)?;
    g.push("fc2", linear(16, experts), Exact, Src::Prev)?;
    g.validate()?;
    Ok(g)
}

/// Gateway used when a cluster model is requested without an explicit one:
/// an executable network for the toy models, a MAC budget otherwise.
pub fn default_gateway(base: &ModelGraph, experts: usize) -> Result<Gateway> {
    Ok(if base.name.starts_with("toy") {
        Gateway::Network {
            graph: Box::new(toy_gateway(base.input.clone(), experts)?),
        }
    } else {
        match base.family {
            Family::Transformer => Gateway::Budget { macs: VIT_GATEWAY_MACS },
            _ => Gateway::Budget { macs: CNN_GATEWAY_MACS },
        }
    })
}

/// Set every conv/linear node to `mode` (used to build all-exact references).
pub fn with_mode(mut g: ModelGraph, mode: ArithmeticMode) -> ModelGraph {
    for n in &mut g.nodes {
        if n.spec.kind.may_approximate() {
            n.spec.mode = mode;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;

    fn count(g: &ModelGraph, tag: &str) -> usize {
        g.nodes.iter().filter(|n| n.spec.kind.tag() == tag).count()
    }

    #[test]
    fn layer_inventories() {
        let r = resnet20(100).unwrap();
        assert_eq!(count(&r, "conv2d"), 21);
        assert_eq!(count(&r, "linear"), 1);
        assert_eq!(r.unit_count(), 18);
        let v11 = vgg_bn(11, 100).unwrap();
        assert_eq!(count(&v11, "conv2d"), 8);
        assert_eq!(v11.unit_count(), 7);
        let v19 = vgg_bn(19, 100).unwrap();
        assert_eq!(count(&v19, "conv2d"), 16);
        let vit = vit(&VitConfig::small()).unwrap();
        assert_eq!(vit.name, "vit_small_spec");
        assert_eq!(count(&vit, "linear"), 4 * 12 + 1);
        assert_eq!(vit.unit_count(), 12);
        let tokens = vit.nodes.iter().find(|n| matches!(n.spec.kind, LayerKind::PatchTokens { .. })).unwrap();
        assert_eq!(tokens.output, vec![197, 384]);
    }

    #[test]
    fn parameter_counts() {
        // weights + biases + norm affine, summed by hand from the layer list
        let p = |g: &ModelGraph| g.nodes.iter().map(|n| n.params()).sum::<u64>();
        assert_eq!(p(&resnet20(100).unwrap()), 278_324);
        assert_eq!(p(&vgg_bn(11, 100).unwrap()), 9_802_596);
    }

    #[test]
    fn unknown_arch() {
        assert!(build("alexnet", None, None).is_err());
        for n in ARCH_NAMES {
            build(n, None, None).unwrap().validate().unwrap();
        }
    }
}

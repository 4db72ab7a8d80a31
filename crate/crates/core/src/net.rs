//! Executable networks built from a [`ModelGraph`], with per-sample forward
//! traces and reverse-mode gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::axmul::AxMultiplier;
use crate::error::{bail, Error, Result};
use crate::graph::{ArithmeticMode, LayerKind, ModelGraph, Src};
use crate::moe::{ClusterModel, ExpertSet, MoeLayer, MoeTrace, Router};
use crate::ops::{self, Arithmetic, BatchNormParams, ConvGeom};
use crate::quant::fake_quantize;
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-5;
const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Router,
    Gateway,
    /// Running statistics; never updated by the optimizer.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub(crate) slot: usize,
}

impl Param {
    fn new(name: String, kind: ParamKind, value: Tensor) -> Self {
        Self {
            name,
            kind,
            value,
            slot: usize::MAX,
        }
    }
}

/// Per-run execution counters, indexed by graph node or MoE group.
#[derive(Debug, Default)]
pub struct ExecStats {
    /// MACs executed by conv/linear (and approximated attention) nodes.
    pub macs: Vec<AtomicU64>,
    /// Multiplier table lookups per node.
    pub lut: Vec<AtomicU64>,
    /// Exact router MACs per MoE group.
    pub router_macs: Vec<AtomicU64>,
    /// Routed units handed to each expert, per group.
    pub expert_calls: Vec<Vec<AtomicU64>>,
    pub gateway_runs: AtomicU64,
    /// Inputs dispatched to each cluster replica.
    pub replica_calls: Vec<AtomicU64>,
    pub gateway: Option<Box<ExecStats>>,
}

fn counters(n: usize) -> Vec<AtomicU64> {
    (0..n).map(|_| AtomicU64::new(0)).collect()
}

fn load(v: &[AtomicU64]) -> Vec<u64> {
    v.iter().map(|c| c.load(Ordering::Relaxed)).collect()
}

impl ExecStats {
    pub fn for_graph(g: &ModelGraph) -> Self {
        let gateway = g.cluster.as_ref().and_then(|c| match &c.gateway {
            crate::graph::Gateway::Network { graph } => Some(Box::new(ExecStats::for_graph(graph))),
            crate::graph::Gateway::Budget { .. } => None,
        });
        Self {
            macs: counters(g.nodes.len()),
            lut: counters(g.nodes.len()),
            router_macs: counters(g.groups.len()),
            expert_calls: g.groups.iter().map(|grp| counters(grp.experts)).collect(),
            gateway_runs: AtomicU64::new(0),
            replica_calls: counters(g.cluster.as_ref().map_or(0, |c| c.experts)),
            gateway,
        }
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            macs: load(&self.macs),
            lut: load(&self.lut),
            router_macs: load(&self.router_macs),
            expert_calls: self.expert_calls.iter().map(|v| load(v)).collect(),
            gateway_runs: self.gateway_runs.load(Ordering::Relaxed),
            replica_calls: load(&self.replica_calls),
            gateway: self.gateway.as_ref().map(|g| Box::new(g.snapshot())),
        }
    }
}

/// Plain copy of [`ExecStats`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub macs: Vec<u64>,
    pub lut: Vec<u64>,
    pub router_macs: Vec<u64>,
    pub expert_calls: Vec<Vec<u64>>,
    pub gateway_runs: u64,
    pub replica_calls: Vec<u64>,
    pub gateway: Option<Box<StatsSnapshot>>,
}

impl StatsSnapshot {
    /// All MACs executed, including routers and the gateway.
    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum::<u64>()
            + self.router_macs.iter().sum::<u64>()
            + self.gateway.as_ref().map_or(0, |g| g.total_macs())
    }

    pub fn total_lut(&self) -> u64 {
        self.lut.iter().sum::<u64>() + self.gateway.as_ref().map_or(0, |g| g.total_lut())
    }
}

/// Arithmetic plus optional counters for one forward run.
#[derive(Debug, Clone, Copy)]
pub struct ExecCtx<'a> {
    pub arith: Arithmetic<'a>,
    pub stats: Option<&'a ExecStats>,
}

impl<'a> ExecCtx<'a> {
    pub fn float() -> Self {
        Self {
            arith: Arithmetic::Float,
            stats: None,
        }
    }

    pub fn lut(m: &'a AxMultiplier) -> Self {
        Self {
            arith: Arithmetic::Lut(m),
            stats: None,
        }
    }

    pub fn with_stats(self, stats: &'a ExecStats) -> Self {
        Self {
            stats: Some(stats),
            ..self
        }
    }

    pub(crate) fn arith_for(&self, mode: ArithmeticMode) -> Arithmetic<'a> {
        match mode {
            ArithmeticMode::Exact => Arithmetic::Float,
            ArithmeticMode::Approximate => self.arith,
        }
    }

    fn multiplier(&self) -> Option<&'a AxMultiplier> {
        match self.arith {
            Arithmetic::Lut(m) => Some(m),
            Arithmetic::Float => None,
        }
    }

    pub(crate) fn count_macs(&self, node: usize, n: u64) {
        if let Some(s) = self.stats {
            s.macs[node].fetch_add(n, Ordering::Relaxed);
        }
    }

    pub(crate) fn lut_counter(&self, node: usize) -> Option<&'a AtomicU64> {
        self.stats.map(|s| &s.lut[node])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum In {
    Input,
    Step(usize),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv {
        geom: ConvGeom,
        w: Param,
        b: Option<Param>,
        mode: ArithmeticMode,
    },
    Linear {
        w: Param,
        b: Option<Param>,
        mode: ArithmeticMode,
    },
    BatchNorm {
        gamma: Param,
        beta: Param,
        mean: Param,
        var: Param,
    },
    LayerNorm {
        gamma: Param,
        beta: Param,
    },
    Relu,
    Gelu,
    Softmax,
    Add {
        skip: In,
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
    Tokens {
        cls: Option<Param>,
        pos: Param,
    },
    ClassToken,
    Attention {
        heads: usize,
        approx: bool,
    },
    Moe(Box<MoeLayer>),
}

impl Op {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Op::Conv { w, b, .. } | Op::Linear { w, b, .. } => {
                out.push(w);
                out.extend(b.iter());
            }
            Op::BatchNorm { gamma, beta, mean, var } => out.extend([gamma, beta, mean, var]),
            Op::LayerNorm { gamma, beta } => out.extend([gamma, beta]),
            Op::Tokens { cls, pos } => {
                out.extend(cls.iter());
                out.push(pos);
            }
            Op::Moe(m) => {
                out.extend(m.router.w.iter());
                for e in &m.experts.experts {
                    e.params(out);
                }
            }
            _ => {}
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Op::Conv { w, b, .. } | Op::Linear { w, b, .. } => {
                out.push(w);
                out.extend(b.iter_mut());
            }
            Op::BatchNorm { gamma, beta, mean, var } => out.extend([gamma, beta, mean, var]),
            Op::LayerNorm { gamma, beta } => out.extend([gamma, beta]),
            Op::Tokens { cls, pos } => {
                out.extend(cls.iter_mut());
                out.push(pos);
            }
            Op::Moe(m) => {
                let m = &mut **m;
                out.extend(m.router.w.iter_mut());
                for e in &mut m.experts.experts {
                    e.params_mut(out);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Step {
    /// Graph node whose output this step produces.
    pub(crate) node: usize,
    pub(crate) src: In,
    pub(crate) op: Op,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    None,
    Argmax(Vec<u32>),
    Moe(Box<MoeTrace>),
}

/// Outputs and caches of one chain run.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub(crate) outs: Vec<Tensor>,
    pub(crate) caches: Vec<Cache>,
}

impl Trace {
    pub(crate) fn output(&self) -> &Tensor {
        self.outs.last().expect("chains are non-empty")
    }
}

fn accumulate(grads: &mut [Tensor], p: &Param, d: &[f32]) {
    for (g, v) in grads[p.slot].data_mut().iter_mut().zip(d) {
        *g += v;
    }
}

/// A sequence of steps; the body of a network or of one expert.
#[derive(Debug, Clone)]
pub struct Chain {
    pub(crate) steps: Vec<Step>,
}

impl Chain {
    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for s in &self.steps {
            s.op.params(out);
        }
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for s in &mut self.steps {
            s.op.params_mut(out);
        }
    }

    pub(crate) fn run(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<Trace> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.steps.len());
        let mut caches = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let get = |i: In| -> &Tensor {
                match i {
                    In::Input => x,
                    In::Step(j) => &outs[j],
                }
            };
            let inp = get(step.src);
            let (out, cache) = match &step.op {
                Op::Conv { geom, w, b, mode } => {
                    ctx.count_macs(step.node, geom.macs(inp.shape()[1], inp.shape()[2]));
                    let y = ops::conv2d_forward(
                        inp,
                        &w.value,
                        b.as_ref().map(|b| &b.value),
                        geom,
                        ctx.arith_for(*mode),
                        ctx.lut_counter(step.node),
                    )?;
                    (y, Cache::None)
                }
                Op::Linear { w, b, mode } => {
                    ctx.count_macs(step.node, (inp.len() * w.value.shape()[0]) as u64);
                    let y = ops::linear_forward(
                        inp,
                        &w.value,
                        b.as_ref().map(|b| &b.value),
                        ctx.arith_for(*mode),
                        ctx.lut_counter(step.node),
                    )?;
                    (y, Cache::None)
                }
                Op::BatchNorm { gamma, beta, mean, var } => (
                    ops::batchnorm2d(
                        inp,
                        &BatchNormParams {
                            gamma: gamma.value.data(),
                            beta: beta.value.data(),
                            mean: mean.value.data(),
                            var: var.value.data(),
                            eps: BN_EPS,
                        },
                    )?,
                    Cache::None,
                ),
                Op::LayerNorm { gamma, beta } => {
                    (ops::layernorm(inp, gamma.value.data(), beta.value.data(), LN_EPS)?, Cache::None)
                }
                Op::Relu => (ops::relu(inp), Cache::None),
                Op::Gelu => (ops::gelu(inp), Cache::None),
                Op::Softmax => (ops::softmax(inp)?, Cache::None),
                Op::Add { skip } => (ops::residual_add(inp, get(*skip))?, Cache::None),
                Op::AvgPool { k, stride } => (ops::avgpool(inp, *k, *stride)?, Cache::None),
                Op::GlobalAvgPool => (ops::global_avgpool(inp)?, Cache::None),
                Op::MaxPool { k, stride } => {
                    let (y, arg) = ops::maxpool(inp, *k, *stride)?;
                    (y, Cache::Argmax(arg))
                }
                Op::Flatten => (inp.clone().reshape(&[inp.len()])?, Cache::None),
                Op::Tokens { cls, pos } => (tokens_forward(inp, cls.as_ref(), pos)?, Cache::None),
                Op::ClassToken => {
                    if inp.rank() != 2 {
                        bail!(Shape, "class token expects [T, F], got {:?}", inp.shape());
                    }
                    let f = inp.shape()[1];
                    (Tensor::from_vec(inp.data()[..f].to_vec()), Cache::None)
                }
                Op::Attention { heads, approx } => {
                    let lut = if *approx { ctx.multiplier() } else { None };
                    if *approx && inp.rank() == 2 {
                        let (t, f) = (inp.shape()[0], inp.shape()[1] / 3);
                        ctx.count_macs(step.node, (2 * t * t * f) as u64);
                    }
                    (ops::attention(inp, *heads, lut, ctx.lut_counter(step.node))?, Cache::None)
                }
                Op::Moe(m) => {
                    let (y, tr) = m.forward(inp, ctx)?;
                    (y, Cache::Moe(Box::new(tr)))
                }
            };
            if !out.is_finite() {
                bail!(Numeric, "non-finite output at node {}", step.node);
            }
            outs.push(out);
            caches.push(cache);
        }
        Ok(Trace { outs, caches })
    }

    /// Backpropagate `dy` through a recorded run. Parameter gradients are
    /// added into `grads`; the input gradient is returned.
    ///
    /// Approximate layers run under a multiplier use the straight-through
    /// rule: gradients are those of a float layer evaluated at the
    /// quantized-then-dequantized operands.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        trace: &Trace,
        dy: Tensor,
        ctx: &ExecCtx<'_>,
        grads: &mut [Tensor],
    ) -> Result<Tensor> {
        let n = self.steps.len();
        let mut g: Vec<Option<Tensor>> = vec![None; n];
        g[n - 1] = Some(dy);
        let mut dx: Option<Tensor> = None;
        let send = |g: &mut Vec<Option<Tensor>>, dx: &mut Option<Tensor>, to: In, t: Tensor| -> Result<()> {
            let slot = match to {
                In::Input => dx,
                In::Step(j) => &mut g[j],
            };
            match slot {
                Some(acc) => acc.add_assign(&t)?,
                None => *slot = Some(t),
            }
            Ok(())
        };
        for i in (0..n).rev() {
            let Some(gy) = g[i].take() else { continue };
            let step = &self.steps[i];
            let inp = match step.src {
                In::Input => x,
                In::Step(j) => &trace.outs[j],
            };
            let out = &trace.outs[i];
            let ste = matches!(ctx.arith, Arithmetic::Lut(_));
            let d_in = match &step.op {
                Op::Conv { geom, w, b, mode } => {
                    let (dxi, dw, db) = if ste && *mode == ArithmeticMode::Approximate {
                        ops::conv2d_backward(&fake_quantize(inp)?, &fake_quantize(&w.value)?, geom, &gy)?
                    } else {
                        ops::conv2d_backward(inp, &w.value, geom, &gy)?
                    };
                    accumulate(grads, w, dw.data());
                    if let Some(b) = b {
                        accumulate(grads, b, db.data());
                    }
                    dxi
                }
                Op::Linear { w, b, mode } => {
                    let (dxi, dw, db) = if ste && *mode == ArithmeticMode::Approximate {
                        ops::linear_backward(&fake_quantize(inp)?, &fake_quantize(&w.value)?, &gy)?
                    } else {
                        ops::linear_backward(inp, &w.value, &gy)?
                    };
                    accumulate(grads, w, dw.data());
                    if let Some(b) = b {
                        accumulate(grads, b, db.data());
                    }
                    dxi
                }
                Op::BatchNorm { gamma, beta, mean, var } => {
                    let c = inp.shape()[0];
                    let hw = inp.len() / c.max(1);
                    let mut dxv = vec![0f32; inp.len()];
                    let mut dg = vec![0f32; c];
                    let mut dbt = vec![0f32; c];
                    for ch in 0..c {
                        let inv = 1.0 / (var.value.data()[ch] + BN_EPS).sqrt();
                        let (mu, ga) = (mean.value.data()[ch], gamma.value.data()[ch]);
                        for k in ch * hw..(ch + 1) * hw {
                            let gv = gy.data()[k];
                            dg[ch] += gv * (inp.data()[k] - mu) * inv;
                            dbt[ch] += gv;
                            dxv[k] = gv * ga * inv;
                        }
                    }
                    accumulate(grads, gamma, &dg);
                    accumulate(grads, beta, &dbt);
                    Tensor::new(inp.shape().to_vec(), dxv)?
                }
                Op::LayerNorm { gamma, beta } => {
                    let (dxi, dg, dbt) = ops::layernorm_backward(inp, gamma.value.data(), LN_EPS, &gy)?;
                    accumulate(grads, gamma, &dg);
                    accumulate(grads, beta, &dbt);
                    dxi
                }
                Op::Relu => {
                    let mut d = gy;
                    for (v, &o) in d.data_mut().iter_mut().zip(out.data()) {
                        if o <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    d
                }
                Op::Gelu => {
                    let mut d = gy;
                    for (v, &a) in d.data_mut().iter_mut().zip(inp.data()) {
                        *v *= ops::gelu_grad(a);
                    }
                    d
                }
                Op::Softmax => {
                    let f = *out.shape().last().expect("rank >= 1");
                    let mut d = Tensor::zeros(out.shape());
                    for ((p, dp), dz) in out
                        .data()
                        .chunks_exact(f)
                        .zip(gy.data().chunks_exact(f))
                        .zip(d.data_mut().chunks_exact_mut(f))
                    {
                        ops::softmax_backward_row(p, dp, dz);
                    }
                    d
                }
                Op::Add { skip } => {
                    send(&mut g, &mut dx, *skip, gy.clone())?;
                    gy
                }
                Op::AvgPool { k, stride } => ops::avgpool_backward(inp.shape(), *k, *stride, &gy)?,
                Op::GlobalAvgPool => {
                    let c = inp.shape()[0];
                    let hw = inp.len() / c.max(1);
                    let mut d = Tensor::zeros(inp.shape());
                    for (ch, chunk) in d.data_mut().chunks_exact_mut(hw.max(1)).enumerate() {
                        chunk.fill(gy.data()[ch] / hw as f32);
                    }
                    d
                }
                Op::MaxPool { .. } => {
                    let Cache::Argmax(arg) = &trace.caches[i] else {
                        unreachable!("maxpool records its argmax")
                    };
                    let mut d = Tensor::zeros(inp.shape());
                    for (&a, &v) in arg.iter().zip(gy.data()) {
                        d.data_mut()[a as usize] += v;
                    }
                    d
                }
                Op::Flatten => gy.reshape(inp.shape())?,
                Op::Tokens { cls, pos } => {
                    accumulate(grads, pos, gy.data());
                    let (c, hw) = (inp.shape()[0], inp.shape()[1] * inp.shape()[2]);
                    let off = usize::from(cls.is_some());
                    if let Some(cls) = cls {
                        accumulate(grads, cls, &gy.data()[..c]);
                    }
                    let mut d = Tensor::zeros(inp.shape());
                    for p in 0..hw {
                        for ch in 0..c {
                            d.data_mut()[ch * hw + p] = gy.data()[(p + off) * c + ch];
                        }
                    }
                    d
                }
                Op::ClassToken => {
                    let mut d = Tensor::zeros(inp.shape());
                    d.data_mut()[..gy.len()].copy_from_slice(gy.data());
                    d
                }
                Op::Attention { .. } => bail!(Param, "attention layers have no backward pass"),
                Op::Moe(m) => {
                    let Cache::Moe(tr) = &trace.caches[i] else {
                        unreachable!("moe layers record a trace")
                    };
                    m.backward(inp, tr, &gy, ctx, grads)?
                }
            };
            send(&mut g, &mut dx, step.src, d_in)?;
        }
        Ok(dx.unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

fn tokens_forward(x: &Tensor, cls: Option<&Param>, pos: &Param) -> Result<Tensor> {
    if x.rank() != 3 {
        bail!(Shape, "patch tokens expect [C, H, W], got {:?}", x.shape());
    }
    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let off = usize::from(cls.is_some());
    let t = hw + off;
    if pos.value.shape() != [t, c] {
        bail!(Shape, "position embedding {:?}, expected [{t}, {c}]", pos.value.shape());
    }
    let mut out = pos.value.clone();
    let d = out.data_mut();
    if let Some(cls) = cls {
        for (a, b) in d[..c].iter_mut().zip(cls.value.data()) {
            *a += b;
        }
    }
    for p in 0..hw {
        for ch in 0..c {
            d[(p + off) * c + ch] += x.data()[ch * hw + p];
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in.max(1) as f32).sqrt()
}

/// Build the step for one non-grouped graph node.
fn build_op(g: &ModelGraph, at: usize, prefix: &str, rng: &mut ChaCha8Rng, map_src: &dyn Fn(Src) -> In) -> Result<Op> {
    let node = &g.nodes[at];
    let name = format!("{prefix}{}", node.name);
    let p = |suffix: &str, kind: ParamKind, t: Tensor| Param::new(format!("{name}.{suffix}"), kind, t);
    Ok(match node.spec.kind {
        LayerKind::Conv2d { bias, .. } => {
            let geom = ConvGeom::from_kind(&node.spec.kind).expect("conv kind");
            let ws = geom.weight_shape();
            let fan_in = ws[1] * ws[2] * ws[3];
            Op::Conv {
                geom,
                w: p("weight", ParamKind::Weight, uniform(rng, &ws, he_bound(fan_in))),
                b: bias.then(|| p("bias", ParamKind::Bias, Tensor::zeros(&[geom.c_out]))),
                mode: node.spec.mode,
            }
        }
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => Op::Linear {
            w: p(
                "weight",
                ParamKind::Weight,
                uniform(rng, &[out_features, in_features], he_bound(in_features)),
            ),
            b: bias.then(|| p("bias", ParamKind::Bias, Tensor::zeros(&[out_features]))),
            mode: node.spec.mode,
        },
        LayerKind::BatchNorm2d { channels } => Op::BatchNorm {
            gamma: p("gamma", ParamKind::Norm, Tensor::full(&[channels], 1.0)),
            beta: p("beta", ParamKind::Norm, Tensor::zeros(&[channels])),
            mean: p("running_mean", ParamKind::Buffer, Tensor::zeros(&[channels])),
            var: p("running_var", ParamKind::Buffer, Tensor::full(&[channels], 1.0)),
        },
        LayerKind::LayerNorm { features } => Op::LayerNorm {
            gamma: p("gamma", ParamKind::Norm, Tensor::full(&[features], 1.0)),
            beta: p("beta", ParamKind::Norm, Tensor::zeros(&[features])),
        },
        LayerKind::Relu => Op::Relu,
        LayerKind::Gelu => Op::Gelu,
        LayerKind::Softmax => Op::Softmax,
        LayerKind::ResidualAdd { skip } => Op::Add { skip: map_src(skip) },
        LayerKind::AvgPool { k, stride } => Op::AvgPool { k, stride },
        LayerKind::GlobalAvgPool => Op::GlobalAvgPool,
        LayerKind::MaxPool { k, stride } => Op::MaxPool { k, stride },
        LayerKind::Flatten => Op::Flatten,
        LayerKind::PatchTokens { class_token } => {
            let f = node.output[1];
            Op::Tokens {
                cls: class_token.then(|| p("cls", ParamKind::Embedding, uniform(rng, &[f], 0.02))),
                pos: p("pos", ParamKind::Embedding, uniform(rng, &node.output, 0.02)),
            }
        }
        LayerKind::ClassToken => Op::ClassToken,
        LayerKind::Attention { heads, approx_matmuls } => Op::Attention {
            heads,
            approx: approx_matmuls,
        },
    })
}

/// A single (non-cluster) network.
#[derive(Debug, Clone)]
pub struct Network {
    graph: ModelGraph,
    body: Chain,
}

impl Network {
    /// Build and initialise a network for `graph` (which must not be a
    /// cluster model) from `seed`.
    pub fn from_graph(graph: &ModelGraph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(graph, &mut rng, None, "")
    }

    pub(crate) fn build(graph: &ModelGraph, rng: &mut ChaCha8Rng, kind: Option<ParamKind>, prefix: &str) -> Result<Self> {
        graph.validate()?;
        if graph.cluster.is_some() {
            bail!(Param, "cluster graphs build a cluster model, not a single network");
        }
        let mut step_of: Vec<Option<usize>> = vec![None; graph.nodes.len()];
        let mut steps: Vec<Step> = Vec::new();
        let mut i = 0;
        while i < graph.nodes.len() {
            let node = &graph.nodes[i];
            let src_map = |at: usize| {
                let step_of = &step_of;
                move |s: Src| match graph.resolve(at, s) {
                    None => In::Input,
                    Some(j) => In::Step(step_of[j].expect("sources precede readers")),
                }
            };
            if let Some(gid) = node.group {
                let members: Vec<usize> = (i..graph.nodes.len()).take_while(|&j| graph.nodes[j].group == Some(gid)).collect();
                let last = *members.last().expect("non-empty");
                let group = &graph.groups[gid];
                let router = Router::init(&format!("{prefix}moe{gid}"), group, rng)?;
                let mut experts = Vec::with_capacity(group.experts);
                for e in 0..group.experts {
                    let mut chain = Vec::with_capacity(members.len());
                    for (k, &j) in members.iter().enumerate() {
                        let src = if k == 0 { In::Input } else { In::Step(k - 1) };
                        let op = build_op(graph, j, &format!("{prefix}e{e}."), rng, &|_| In::Input)?;
                        chain.push(Step { node: j, src, op });
                    }
                    experts.push(Chain { steps: chain });
                }
                let layer = MoeLayer {
                    group: gid,
                    routing: group.routing,
                    router,
                    experts: ExpertSet { experts },
                };
                let src = src_map(i)(node.src);
                steps.push(Step {
                    node: last,
                    src,
                    op: Op::Moe(Box::new(layer)),
                });
                step_of[last] = Some(steps.len() - 1);
                i = last + 1;
            } else {
                let map = src_map(i);
                let op = build_op(graph, i, prefix, rng, &map)?;
                let src = map(node.src);
                steps.push(Step { node: i, src, op });
                step_of[i] = Some(steps.len() - 1);
                i += 1;
            }
        }
        let mut net = Network {
            graph: graph.clone(),
            body: Chain { steps },
        };
        for (slot, p) in net.params_mut().into_iter().enumerate() {
            p.slot = slot;
            if let Some(k) = kind {
                if p.kind != ParamKind::Buffer {
                    p.kind = k;
                }
            }
        }
        Ok(net)
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.body.params(&mut v);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.body.params_mut(&mut v);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|p| p.kind != ParamKind::Buffer).map(|p| p.value.len()).sum()
    }

    /// Zero gradients, one per parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.graph.input.as_slice() {
            bail!(Shape, "{} expects input {:?}, got {:?}", self.graph.name, self.graph.input, x.shape());
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<Tensor> {
        Ok(self.trace(x, ctx)?.outs.pop().expect("non-empty"))
    }

    pub(crate) fn trace(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<Trace> {
        self.check_input(x)?;
        self.body.run(x, ctx)
    }

    /// Cross-entropy loss of one sample and its parameter gradients (added
    /// into `grads`, scaled by `weight`).
    pub fn sample_grad(&self, x: &Tensor, label: usize, weight: f32, ctx: &ExecCtx<'_>, grads: &mut [Tensor]) -> Result<f32> {
        let tr = self.trace(x, ctx)?;
        let (loss, mut dlogits) = cross_entropy(tr.output().data(), label)?;
        for v in &mut dlogits {
            *v *= weight;
        }
        let dy = Tensor::new(tr.output().shape().to_vec(), dlogits)?;
        self.body.backward(x, &tr, dy, ctx, grads)?;
        Ok(loss)
    }

    /// Expert chosen (highest gate) by every MoE unit, in group order.
    pub fn routing_decisions(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<Vec<Vec<usize>>> {
        let tr = self.trace(x, ctx)?;
        Ok(tr
            .caches
            .iter()
            .filter_map(|c| match c {
                Cache::Moe(m) => Some(m.decisions()),
                _ => None,
            })
            .collect())
    }

    /// MoE layers in execution order.
    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.body
            .steps
            .iter()
            .filter_map(|s| match &s.op {
                Op::Moe(m) => Some(&**m),
                _ => None,
            })
            .collect()
    }

    pub fn moe_layers_mut(&mut self) -> Vec<&mut MoeLayer> {
        self.body
            .steps
            .iter_mut()
            .filter_map(|s| match &mut s.op {
                Op::Moe(m) => Some(&mut **m),
                _ => None,
            })
            .collect()
    }
}

/// Mean-free cross-entropy of one logit vector: `(loss, dloss/dlogits)`.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    if label >= logits.len() {
        bail!(Param, "label {label} out of range for {} classes", logits.len());
    }
    let mut p = logits.to_vec();
    ops::softmax_in_place(&mut p);
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    let loss = lse - logits[label];
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss");
    }
    p[label] -= 1.0;
    Ok((loss, p))
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A runnable model: one network, or a gateway plus replicas.
#[derive(Debug, Clone)]
pub enum Model {
    Single(Network),
    Cluster(ClusterModel),
}

impl Model {
    pub fn from_graph(graph: &ModelGraph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if graph.cluster.is_some() {
            Ok(Model::Cluster(ClusterModel::build(graph, &mut rng)?))
        } else {
            Ok(Model::Single(Network::build(graph, &mut rng, None, "")?))
        }
    }

    pub fn graph(&self) -> &ModelGraph {
        match self {
            Model::Single(n) => n.graph(),
            Model::Cluster(c) => &c.graph,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<Tensor> {
        match self {
            Model::Single(n) => n.forward(x, ctx),
            Model::Cluster(c) => crate::moe::route_cluster(x, c, ctx),
        }
    }

    /// All parameters; cluster models list the gateway first.
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Model::Single(n) => n.params(),
            Model::Cluster(c) => {
                let mut v = c.gateway.params();
                for r in &c.replicas {
                    v.extend(r.params());
                }
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Model::Single(n) => n.params_mut(),
            Model::Cluster(c) => {
                let mut v = c.gateway.params_mut();
                for r in &mut c.replicas {
                    v.extend(r.params_mut());
                }
                v
            }
        }
    }

    pub fn networks(&self) -> Vec<&Network> {
        match self {
            Model::Single(n) => vec![n],
            Model::Cluster(c) => std::iter::once(&c.gateway).chain(c.replicas.iter()).collect(),
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            Model::Single(n) => vec![n],
            Model::Cluster(c) => std::iter::once(&mut c.gateway).chain(c.replicas.iter_mut()).collect(),
        }
    }

    /// Replace parameter values by name.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            bail!(Format, "checkpoint has {} tensors, model has {}", values.len(), params.len());
        }
        for (p, (name, t)) in params.iter_mut().zip(values) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Run `model` over a batch; results are in input order.
pub fn predict(model: &Model, xs: &[Tensor], ctx: &ExecCtx<'_>) -> Result<Vec<Tensor>> {
    crate::par::map(xs, |x| model.forward(x, ctx)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;

    fn probe(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, shape, 1.0)
    }

    #[test]
    fn toy_forward_is_deterministic() {
        let g = arch::toy_cnn(vec![3, 8, 8], 10).unwrap();
        let a = Network::from_graph(&g, 7).unwrap();
        let b = Network::from_graph(&g, 7).unwrap();
        let x = probe(&[3, 8, 8], 1);
        let m = crate::axmul::build_truncation_multiplier(2, 0.3).unwrap();
        let ya = a.forward(&x, &ExecCtx::lut(&m)).unwrap();
        let yb = b.forward(&x, &ExecCtx::lut(&m)).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(ya.shape(), &[10]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = arch::toy_mlp(vec![4], 3, 2).unwrap();
        let n = Network::from_graph(&g, 0).unwrap();
        assert!(matches!(n.forward(&Tensor::zeros(&[5]), &ExecCtx::float()), Err(Error::Shape(_))));
    }

    #[test]
    fn counters_match_node_macs() {
        let g = arch::toy_cnn(vec![3, 8, 8], 10).unwrap();
        let n = Network::from_graph(&g, 3).unwrap();
        let m = crate::axmul::build_exact_multiplier();
        let stats = ExecStats::for_graph(&g);
        n.forward(&probe(&[3, 8, 8], 2), &ExecCtx::lut(&m).with_stats(&stats)).unwrap();
        let s = stats.snapshot();
        for (i, node) in g.nodes.iter().enumerate() {
            assert_eq!(s.macs[i], node.macs(), "{}", node.name);
            let want = if node.is_approximate() { node.macs() } else { 0 };
            assert_eq!(s.lut[i], want, "{}", node.name);
        }
    }

    #[test]
    fn zero_classifier_loss_is_ln2() {
        let (l, d) = cross_entropy(&[0.0, 0.0], 1).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(d, vec![0.5, -0.5]);
    }

    #[test]
    fn token_layers_round_trip_gradients() {
        let cfg = arch::VitConfig {
            image: 8,
            patch: 4,
            dim: 12,
            depth: 1,
            heads: 2,
            mlp: 16,
            classes: 3,
            approx_attention_matmuls: false,
        };
        let g = arch::vit(&cfg).unwrap();
        let n = Network::from_graph(&g, 5).unwrap();
        let y = n.forward(&probe(&[3, 8, 8], 9), &ExecCtx::float()).unwrap();
        assert_eq!(y.shape(), &[3]);
        let mut grads = n.zero_grads();
        // attention has no backward pass
        assert!(n.sample_grad(&probe(&[3, 8, 8], 9), 0, 1.0, &ExecCtx::float(), &mut grads).is_err());
    }
}

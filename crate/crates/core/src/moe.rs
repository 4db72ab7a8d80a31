//! Mixture-of-experts substitution on graphs and the three routing
//! topologies at run time.
//!
//! Routers compute `softmax(W r)` in float, where `r` is the routed unit's
//! feature vector: the channel means of a `[C, H, W]` sample, the sample
//! itself when it is a vector, the token mean of a `[T, F]` sample, or one
//! token row under per-token routing. Routers have no bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch;
use crate::error::{bail, Result};
use crate::graph::{
    ArithmeticMode, ClusterSpec, Family, Gateway, Granularity, ModelGraph, MoeGroup, Routing, Variant,
};
use crate::net::{argmax, Chain, ExecCtx, Network, Param, ParamKind, Trace};
use crate::ops::{softmax_backward_row, softmax_in_place, Arithmetic};
use crate::tensor::Tensor;
use std::sync::atomic::Ordering;

/// Expert count used when none is given.
pub const DEFAULT_EXPERTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOptions {
    pub experts: usize,
    /// Fraction of transformer blocks whose FFN is converted (deepest
    /// blocks first). Only valid for transformers.
    pub ratio: Option<f64>,
    pub granularity: Option<Granularity>,
    /// Cluster gateway; defaults to [`arch::default_gateway`].
    pub gateway: Option<Gateway>,
    pub gateway_mode: ArithmeticMode,
}

impl Default for MoeOptions {
    fn default() -> Self {
        Self {
            experts: DEFAULT_EXPERTS,
            ratio: None,
            granularity: None,
            gateway: None,
            gateway_mode: ArithmeticMode::Exact,
        }
    }
}

/// Default transformer conversion ratio.
pub const DEFAULT_RATIO: f64 = 0.25;

/// Replace the substitution units of `base` with `n`-expert MoE layers.
pub fn substitute_moe(base: &ModelGraph, variant: Variant, n: usize) -> Result<ModelGraph> {
    substitute_moe_with(
        base,
        variant,
        &MoeOptions {
            experts: n,
            ..MoeOptions::default()
        },
    )
}

pub fn substitute_moe_with(base: &ModelGraph, variant: Variant, opts: &MoeOptions) -> Result<ModelGraph> {
    base.validate()?;
    if !base.groups.is_empty() || base.cluster.is_some() || base.variant != Variant::Dense {
        bail!(Param, "{} is already a mixture-of-experts graph", base.name);
    }
    if opts.experts == 0 {
        bail!(Param, "expert count must be at least 1");
    }
    if let Some(r) = opts.ratio {
        if base.family != Family::Transformer {
            bail!(Param, "an MoE ratio only applies to transformer graphs");
        }
        if !(r > 0.0 && r <= 1.0) {
            bail!(Param, "MoE ratio {r} must lie in (0, 1]");
        }
    }
    let mut g = base.clone();
    g.variant = variant;
    let routing = match variant {
        Variant::Dense => return Ok(g),
        Variant::Cluster => {
            let gateway = match &opts.gateway {
                Some(gw) => gw.clone(),
                None => arch::default_gateway(base, opts.experts)?,
            };
            g.cluster = Some(ClusterSpec {
                experts: opts.experts,
                gateway,
                gateway_mode: opts.gateway_mode,
            });
            g.validate()?;
            return Ok(g);
        }
        Variant::Hard => Routing::Hard,
        Variant::Soft => Routing::Soft,
    };
    let units = g.unit_count();
    if units == 0 {
        bail!(Param, "{} has no substitution units", base.name);
    }
    let chosen: Vec<usize> = if g.family == Family::Transformer {
        let r = opts.ratio.unwrap_or(DEFAULT_RATIO);
        let k = ((r * units as f64).round() as usize).clamp(1, units);
        (units - k..units).collect()
    } else {
        (0..units).collect()
    };
    let granularity = opts.granularity.unwrap_or(match g.family {
        Family::Transformer => Granularity::PerToken,
        _ => Granularity::PerSample,
    });
    for u in chosen {
        let members: Vec<usize> = (0..g.nodes.len()).filter(|&i| g.nodes[i].unit == Some(u)).collect();
        let first = &g.nodes[members[0]];
        let shape = &first.input;
        let (router_in, routed) = match granularity {
            Granularity::PerToken => {
                if shape.len() != 2 {
                    bail!(Shape, "per-token routing needs [T, F] inputs, unit {u} sees {shape:?}");
                }
                (shape[1], shape[0])
            }
            Granularity::PerSample => (*shape.first().unwrap_or(&0), 1),
        };
        let router_in = if granularity == Granularity::PerSample && shape.len() == 2 {
            shape[1]
        } else {
            router_in
        };
        let gid = g.groups.len();
        g.groups.push(MoeGroup {
            experts: opts.experts,
            routing,
            granularity,
            router_in,
            units: routed,
        });
        for m in members {
            g.nodes[m].group = Some(gid);
        }
    }
    g.validate()?;
    Ok(g)
}

/// Softmax gate over experts.
#[derive(Debug, Clone)]
pub struct Router {
    /// `[experts, features]`; absent for a single expert.
    pub(crate) w: Option<Param>,
    experts: usize,
    granularity: Granularity,
}

impl Router {
    pub(crate) fn init(name: &str, group: &MoeGroup, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = if group.experts > 1 {
            let bound = 1.0 / (group.router_in.max(1) as f32).sqrt();
            let data = (0..group.experts * group.router_in).map(|_| rng.random_range(-bound..=bound)).collect();
            Some(Param {
                name: format!("{name}.router.weight"),
                kind: ParamKind::Router,
                value: Tensor::new(vec![group.experts, group.router_in], data)?,
                slot: usize::MAX,
            })
        } else {
            None
        };
        Ok(Self {
            w,
            experts: group.experts,
            granularity: group.granularity,
        })
    }

    /// Router with an explicit `[experts, features]` weight.
    pub fn new(weight: Tensor, granularity: Granularity) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[0] == 0 {
            bail!(Shape, "router weight must be [experts, features], got {:?}", weight.shape());
        }
        Ok(Self {
            experts: weight.shape()[0],
            w: Some(Param {
                name: "router.weight".into(),
                kind: ParamKind::Router,
                value: weight,
                slot: 0,
            }),
            granularity,
        })
    }

    /// Router for a single expert; its gate is always `[1.0]`.
    pub fn single(granularity: Granularity) -> Self {
        Self {
            w: None,
            experts: 1,
            granularity,
        }
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.w.as_ref().map(|p| &p.value)
    }

    pub fn set_weight(&mut self, t: Tensor) -> Result<()> {
        match &mut self.w {
            Some(p) if p.value.shape() == t.shape() => {
                p.value = t;
                Ok(())
            }
            _ => bail!(Shape, "router weight shape mismatch"),
        }
    }

    pub fn logits(&self, r: &[f32]) -> Result<Vec<f32>> {
        match &self.w {
            None => Ok(vec![0.0]),
            Some(w) => {
                let f = w.value.shape()[1];
                if r.len() != f {
                    bail!(Shape, "router expects {f} features, got {}", r.len());
                }
                Ok(w.value.data().chunks_exact(f).map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
            }
        }
    }

    /// `softmax(W r)`, always in float.
    pub fn gate(&self, r: &[f32]) -> Result<Vec<f32>> {
        let mut z = self.logits(r)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Feature vectors of the routed units of `x`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        let s = x.shape();
        Ok(match (self.granularity, s.len()) {
            (Granularity::PerToken, 2) => x.data().chunks_exact(s[1].max(1)).map(<[f32]>::to_vec).collect(),
            (Granularity::PerToken, _) => bail!(Shape, "per-token routing needs [T, F], got {s:?}"),
            (Granularity::PerSample, 1) => vec![x.data().to_vec()],
            (Granularity::PerSample, 2) => {
                let (t, f) = (s[0], s[1]);
                let mut m = vec![0f32; f];
                for row in x.data().chunks_exact(f.max(1)) {
                    for (a, b) in m.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![m.into_iter().map(|v| v / t as f32).collect()]
            }
            (Granularity::PerSample, 3) => {
                let hw = (s[1] * s[2]).max(1);
                vec![x.data().chunks_exact(hw).map(|c| c.iter().sum::<f32>() / hw as f32).collect()]
            }
            _ => bail!(Shape, "cannot route input {s:?}"),
        })
    }

    fn features_backward(&self, x_shape: &[usize], unit: usize, d: &[f32], dx: &mut Tensor) {
        let out = dx.data_mut();
        match (self.granularity, x_shape.len()) {
            (Granularity::PerToken, _) => {
                let f = x_shape[1];
                for (a, b) in out[unit * f..(unit + 1) * f].iter_mut().zip(d) {
                    *a += b;
                }
            }
            (Granularity::PerSample, 1) => {
                for (a, b) in out.iter_mut().zip(d) {
                    *a += b;
                }
            }
            (Granularity::PerSample, 2) => {
                let (t, f) = (x_shape[0], x_shape[1]);
                for row in out.chunks_exact_mut(f) {
                    for (a, b) in row.iter_mut().zip(d) {
                        *a += b / t as f32;
                    }
                }
            }
            _ => {
                let hw = x_shape[1] * x_shape[2];
                for (c, chunk) in out.chunks_exact_mut(hw.max(1)).enumerate() {
                    for v in chunk {
                        *v += d[c] / hw as f32;
                    }
                }
            }
        }
    }
}

/// Identically shaped experts.
#[derive(Debug, Clone)]
pub struct ExpertSet {
    pub(crate) experts: Vec<Chain>,
}

impl ExpertSet {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Copy expert 0's parameters into every other expert.
    pub fn tie_to_first(&mut self) {
        let Some((first, rest)) = self.experts.split_first_mut() else { return };
        let mut src = Vec::new();
        first.params(&mut src);
        for e in rest {
            let mut dst = Vec::new();
            e.params_mut(&mut dst);
            for (d, s) in dst.into_iter().zip(&src) {
                d.value = s.value.clone();
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ExpertRun {
    expert: usize,
    /// Token rows this run covered (per-token hard routing only).
    rows: Option<Vec<usize>>,
    input: Tensor,
    trace: Trace,
}

#[derive(Debug, Clone)]
pub(crate) struct MoeTrace {
    gates: Vec<Vec<f32>>,
    feats: Vec<Vec<f32>>,
    runs: Vec<ExpertRun>,
}

impl MoeTrace {
    pub(crate) fn decisions(&self) -> Vec<usize> {
        self.gates.iter().map(|g| argmax(g)).collect()
    }
}

/// Output of a routed evaluation.
#[derive(Debug, Clone)]
pub struct Routed {
    pub output: Tensor,
    /// Gate vector of every routed unit.
    pub gates: Vec<Vec<f32>>,
    /// Units handed to each expert.
    pub calls: Vec<u64>,
}

/// One MoE layer inside a network.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub group: usize,
    pub routing: Routing,
    pub router: Router,
    pub experts: ExpertSet,
}

fn route(
    x: &Tensor,
    experts: &ExpertSet,
    router: &Router,
    routing: Routing,
    ctx: &ExecCtx<'_>,
) -> Result<(Tensor, MoeTrace, Vec<u64>)> {
    let n = experts.len();
    if n == 0 || router.experts() != n {
        bail!(Shape, "router has {} outputs for {n} experts", router.experts());
    }
    let feats = router.features(x)?;
    let gates = feats.iter().map(|f| router.gate(f)).collect::<Result<Vec<_>>>()?;
    let mut calls = vec![0u64; n];
    let mut runs = Vec::new();
    let mut out: Option<Tensor> = None;
    let add = |out: &mut Option<Tensor>, y: Tensor| -> Result<()> {
        match out {
            Some(acc) => acc.add_assign(&y),
            None => {
                *out = Some(y);
                Ok(())
            }
        }
    };
    match router.granularity() {
        Granularity::PerSample => {
            let g = &gates[0];
            let chosen: Vec<usize> = match routing {
                Routing::Hard => vec![argmax(g)],
                Routing::Soft => (0..n).collect(),
            };
            for e in chosen {
                let trace = experts.experts[e].run(x, ctx)?;
                let mut y = trace.output().clone();
                y.scale(g[e]);
                add(&mut out, y)?;
                calls[e] += 1;
                runs.push(ExpertRun {
                    expert: e,
                    rows: None,
                    input: x.clone(),
                    trace,
                });
            }
        }
        Granularity::PerToken => {
            let f = x.shape()[1];
            match routing {
                Routing::Hard => {
                    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
                    for (t, g) in gates.iter().enumerate() {
                        rows[argmax(g)].push(t);
                    }
                    let mut acc: Option<Tensor> = None;
                    for (e, rs) in rows.into_iter().enumerate() {
                        if rs.is_empty() {
                            continue;
                        }
                        let mut data = Vec::with_capacity(rs.len() * f);
                        for &t in &rs {
                            data.extend_from_slice(&x.data()[t * f..(t + 1) * f]);
                        }
                        let input = Tensor::new(vec![rs.len(), f], data)?;
                        let trace = experts.experts[e].run(&input, ctx)?;
                        let y = trace.output();
                        let fo = y.shape()[1];
                        let acc = acc.get_or_insert_with(|| Tensor::zeros(&[x.shape()[0], fo]));
                        for (k, &t) in rs.iter().enumerate() {
                            let ge = gates[t][e];
                            for c in 0..fo {
                                acc.data_mut()[t * fo + c] = ge * y.data()[k * fo + c];
                            }
                        }
                        calls[e] += rs.len() as u64;
                        runs.push(ExpertRun {
                            expert: e,
                            rows: Some(rs),
                            input,
                            trace,
                        });
                    }
                    out = acc;
                }
                Routing::Soft => {
                    for e in 0..n {
                        let trace = experts.experts[e].run(x, ctx)?;
                        let y = trace.output();
                        let fo = y.shape()[1];
                        let mut w = y.clone();
                        for (t, row) in w.data_mut().chunks_exact_mut(fo).enumerate() {
                            for v in row {
                                *v *= gates[t][e];
                            }
                        }
                        add(&mut out, w)?;
                        calls[e] += gates.len() as u64;
                        runs.push(ExpertRun {
                            expert: e,
                            rows: None,
                            input: x.clone(),
                            trace,
                        });
                    }
                }
            }
        }
    }
    let out = out.expect("at least one expert runs");
    Ok((out, MoeTrace { gates, feats, runs }, calls))
}

/// Weighted blend: every expert runs and the outputs are summed with their
/// gate weights.
pub fn route_soft(x: &Tensor, experts: &ExpertSet, router: &Router, ctx: &ExecCtx<'_>) -> Result<Routed> {
    let (output, tr, calls) = route(x, experts, router, Routing::Soft, ctx)?;
    Ok(Routed {
        output,
        gates: tr.gates,
        calls,
    })
}

/// Top-1: only the highest-gate expert runs (lowest index on ties) and its
/// output is scaled by its gate value.
pub fn route_hard(x: &Tensor, experts: &ExpertSet, router: &Router, ctx: &ExecCtx<'_>) -> Result<Routed> {
    let (output, tr, calls) = route(x, experts, router, Routing::Hard, ctx)?;
    Ok(Routed {
        output,
        gates: tr.gates,
        calls,
    })
}

impl MoeLayer {
    pub(crate) fn forward(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<(Tensor, MoeTrace)> {
        let (y, tr, calls) = route(x, &self.experts, &self.router, self.routing, ctx)?;
        if let Some(s) = ctx.stats {
            for (c, &k) in s.expert_calls[self.group].iter().zip(&calls) {
                c.fetch_add(k, Ordering::Relaxed);
            }
            if let Some(w) = self.router.weight() {
                s.router_macs[self.group].fetch_add((tr.feats.len() * w.len()) as u64, Ordering::Relaxed);
            }
        }
        Ok((y, tr))
    }

    /// Gradients flow to the experts that ran, weighted by their gates, and
    /// through the gate softmax to the router and its input features.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        tr: &MoeTrace,
        dy: &Tensor,
        ctx: &ExecCtx<'_>,
        grads: &mut [Tensor],
    ) -> Result<Tensor> {
        let n = self.experts.len();
        let mut dgate = vec![vec![0f32; n]; tr.gates.len()];
        let mut dx = Tensor::zeros(x.shape());
        let per_token = self.router.granularity() == Granularity::PerToken;
        for run in &tr.runs {
            let e = run.expert;
            let y = run.trace.output();
            let mut dye = Tensor::zeros(y.shape());
            if !per_token {
                let g = tr.gates[0][e];
                dgate[0][e] = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                for (d, &v) in dye.data_mut().iter_mut().zip(dy.data()) {
                    *d = g * v;
                }
            } else {
                let fo = y.shape()[1];
                let rows: Vec<usize> = match &run.rows {
                    Some(r) => r.clone(),
                    None => (0..tr.gates.len()).collect(),
                };
                for (k, &t) in rows.iter().enumerate() {
                    let dyt = &dy.data()[t * fo..(t + 1) * fo];
                    let yk = &y.data()[k * fo..(k + 1) * fo];
                    dgate[t][e] = dyt.iter().zip(yk).map(|(a, b)| a * b).sum();
                    let g = tr.gates[t][e];
                    for (d, &v) in dye.data_mut()[k * fo..(k + 1) * fo].iter_mut().zip(dyt) {
                        *d = g * v;
                    }
                }
            }
            let dxe = self.experts.experts[e].backward(&run.input, &run.trace, dye, ctx, grads)?;
            match &run.rows {
                None => dx.add_assign(&dxe)?,
                Some(rows) => {
                    let f = x.shape()[1];
                    for (k, &t) in rows.iter().enumerate() {
                        for c in 0..f {
                            dx.data_mut()[t * f + c] += dxe.data()[k * f + c];
                        }
                    }
                }
            }
        }
        if let Some(w) = &self.router.w {
            let f = w.value.shape()[1];
            let mut dw = vec![0f32; w.value.len()];
            for (u, (g, dg)) in tr.gates.iter().zip(&dgate).enumerate() {
                let mut dz = vec![0f32; n];
                softmax_backward_row(g, dg, &mut dz);
                let feat = &tr.feats[u];
                let mut dfeat = vec![0f32; f];
                for (i, &z) in dz.iter().enumerate() {
                    let row = &w.value.data()[i * f..(i + 1) * f];
                    for j in 0..f {
                        dw[i * f + j] += z * feat[j];
                        dfeat[j] += z * row[j];
                    }
                }
                self.router.features_backward(x.shape(), u, &dfeat, &mut dx);
            }
            for (a, b) in grads[w.slot].data_mut().iter_mut().zip(&dw) {
                *a += b;
            }
        }
        Ok(dx)
    }
}

/// Gateway network plus full replicas of the base model.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub graph: ModelGraph,
    pub gateway: Network,
    pub replicas: Vec<Network>,
    pub gateway_mode: ArithmeticMode,
}

impl ClusterModel {
    pub(crate) fn build(graph: &ModelGraph, rng: &mut ChaCha8Rng) -> Result<Self> {
        graph.validate()?;
        let Some(spec) = &graph.cluster else {
            bail!(Param, "{} is not a cluster graph", graph.name);
        };
        let Gateway::Network { graph: gw } = &spec.gateway else {
            bail!(Param, "a gateway given only as a MAC budget cannot be executed");
        };
        let mut gw = (**gw).clone();
        if spec.gateway_mode == ArithmeticMode::Approximate {
            // the routing head stays exact
            let last = gw.nodes.len() - 1;
            for (i, n) in gw.nodes.iter_mut().enumerate() {
                if i != last && n.spec.kind.may_approximate() {
                    n.spec.mode = ArithmeticMode::Approximate;
                }
            }
        }
        let gateway = Network::build(&gw, rng, Some(ParamKind::Gateway), "gateway.")?;
        let mut base = graph.clone();
        base.cluster = None;
        base.variant = Variant::Dense;
        let replicas = (0..spec.experts)
            .map(|j| Network::build(&base, rng, None, &format!("replica{j}.")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graph: graph.clone(),
            gateway,
            replicas,
            gateway_mode: spec.gateway_mode,
        })
    }

    fn gateway_ctx<'a>(&self, ctx: &ExecCtx<'a>) -> ExecCtx<'a> {
        ExecCtx {
            arith: match self.gateway_mode {
                ArithmeticMode::Exact => Arithmetic::Float,
                ArithmeticMode::Approximate => ctx.arith,
            },
            stats: ctx.stats.and_then(|s| s.gateway.as_deref()),
        }
    }

    /// Replica chosen by the gateway for `x` (lowest index on ties).
    pub fn select(&self, x: &Tensor, ctx: &ExecCtx<'_>) -> Result<usize> {
        let logits = self.gateway.forward(x, &self.gateway_ctx(ctx))?;
        if let Some(s) = ctx.stats {
            s.gateway_runs.fetch_add(1, Ordering::Relaxed);
        }
        Ok(argmax(logits.data()))
    }
}

/// Image-level routing: the gateway runs once and the selected replica
/// runs end to end.
pub fn route_cluster(x: &Tensor, c: &ClusterModel, ctx: &ExecCtx<'_>) -> Result<Tensor> {
    let j = c.select(x, ctx)?;
    if let Some(s) = ctx.stats {
        s.replica_calls[j].fetch_add(1, Ordering::Relaxed);
    }
    c.replicas[j].forward(x, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::net::{ExecStats, Model};

    #[test]
    fn resnet_soft_triples_block_convs() {
        let base = arch::resnet20(100).unwrap();
        let g = substitute_moe(&base, Variant::Soft, 3).unwrap();
        assert_eq!(g.groups.len(), 18);
        for n in &g.nodes {
            let in_group = n.group.is_some();
            assert_eq!(in_group, n.unit.is_some(), "{}", n.name);
        }
        assert!(g.groups.iter().all(|grp| grp.experts == 3 && grp.units == 1));
    }

    #[test]
    fn vit_ratio_converts_deepest_blocks() {
        let base = arch::build("vit_small_spec", None, None).unwrap();
        let g = substitute_moe_with(
            &base,
            Variant::Hard,
            &MoeOptions {
                ratio: Some(0.25),
                ..MoeOptions::default()
            },
        )
        .unwrap();
        assert_eq!(g.groups.len(), 3);
        let blocks: Vec<&str> = g.nodes.iter().filter(|n| n.group.is_some()).map(|n| n.name.as_str()).collect();
        assert!(blocks.iter().all(|b| b.starts_with("blk9.") || b.starts_with("blk10.") || b.starts_with("blk11.")));
        assert_eq!(g.groups[0].units, 197);
        assert_eq!(g.groups[0].router_in, 384);
    }

    #[test]
    fn ratio_rejected_for_cnn() {
        let base = arch::resnet20(100).unwrap();
        let opts = MoeOptions {
            ratio: Some(0.5),
            ..MoeOptions::default()
        };
        assert!(substitute_moe_with(&base, Variant::Hard, &opts).is_err());
        assert!("sparse".parse::<Variant>().is_err());
    }

    #[test]
    fn hard_routing_runs_one_expert_per_sample() {
        let base = arch::toy_cnn(vec![3, 8, 8], 10).unwrap();
        let g = substitute_moe(&base, Variant::Hard, 3).unwrap();
        let model = Model::from_graph(&g, 1).unwrap();
        let stats = ExecStats::for_graph(&g);
        let ctx = ExecCtx::float().with_stats(&stats);
        for k in 0..5 {
            model.forward(&Tensor::full(&[3, 8, 8], 0.1 * k as f32), &ctx).unwrap();
        }
        let s = stats.snapshot();
        for calls in &s.expert_calls {
            assert_eq!(calls.iter().sum::<u64>(), 5);
        }
    }

    #[test]
    fn gate_logits_pick_expert() {
        let w = Tensor::new(vec![3, 2], vec![5.0, 0.0, -5.0, 0.0, -5.0, 0.0]).unwrap();
        let r = Router::new(w, Granularity::PerSample).unwrap();
        let g = r.gate(&[1.0, 0.0]).unwrap();
        assert_eq!(argmax(&g), 0);
        assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let uniform = Router::new(Tensor::zeros(&[3, 2]), Granularity::PerSample).unwrap();
        assert_eq!(argmax(&uniform.gate(&[0.3, 0.9]).unwrap()), 0);
    }

    #[test]
    fn cluster_gateway_runs_once() {
        let base = arch::toy_mlp(vec![3, 4, 4], 8, 4).unwrap();
        let g = substitute_moe(&base, Variant::Cluster, 3).unwrap();
        let model = Model::from_graph(&g, 2).unwrap();
        let stats = ExecStats::for_graph(&g);
        let ctx = ExecCtx::float().with_stats(&stats);
        model.forward(&Tensor::full(&[3, 4, 4], 0.5), &ctx).unwrap();
        let s = stats.snapshot();
        assert_eq!(s.gateway_runs, 1);
        assert_eq!(s.replica_calls.iter().sum::<u64>(), 1);
    }
}

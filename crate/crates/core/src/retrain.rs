//! SGD training in float and straight-through retraining under a
//! multiplier, with router and gateway parameters frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::axmul::AxMultiplier;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::net::{argmax, ExecCtx, Model, Network, ParamKind};
use crate::par;
use crate::tensor::Tensor;

/// Samples per gradient work item. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 5,
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Param, "learning rate must be positive, got {}", self.learning_rate);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Param, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!(Param, "batch size and epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Param, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        Ok(())
    }
}

/// Optimizer state of one network.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub frozen: Vec<bool>,
    pub epoch: usize,
    pub losses: Vec<f32>,
    velocity: Option<Vec<Tensor>>,
}

impl TrainState {
    /// Everything trainable except running statistics.
    pub fn new(net: &Network) -> Self {
        Self::with_frozen(net, |k| k == ParamKind::Buffer)
    }

    /// Router and gateway parameters frozen as well.
    pub fn for_retrain(net: &Network) -> Self {
        Self::with_frozen(net, |k| matches!(k, ParamKind::Buffer | ParamKind::Router | ParamKind::Gateway))
    }

    pub fn with_frozen(net: &Network, frozen: impl Fn(ParamKind) -> bool) -> Self {
        Self {
            frozen: net.params().iter().map(|p| frozen(p.kind)).collect(),
            epoch: 0,
            losses: Vec::new(),
            velocity: None,
        }
    }
}

/// Mean cross-entropy over `batch` and its gradients.
pub fn forward_backward(net: &Network, batch: &[(&Tensor, usize)], ctx: &ExecCtx<'_>) -> Result<(f32, Vec<Tensor>)> {
    if batch.is_empty() {
        bail!(Param, "empty batch");
    }
    let weight = 1.0 / batch.len() as f32;
    let chunks: Vec<&[(&Tensor, usize)]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = par::map(&chunks, |chunk| -> Result<(f32, Vec<Tensor>)> {
        let mut grads = net.zero_grads();
        let mut loss = 0.0;
        for &(x, y) in chunk.iter() {
            loss += net.sample_grad(x, y, weight, ctx, &mut grads)?;
        }
        Ok((loss, grads))
    });
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let loss = total * weight;
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss");
    }
    Ok((loss, grads.expect("non-empty batch")))
}

pub fn float_forward_backward(net: &Network, batch: &[(&Tensor, usize)]) -> Result<(f32, Vec<Tensor>)> {
    forward_backward(net, batch, &ExecCtx::float())
}

/// Forward through `m`; backward as float over the quantized operands.
pub fn ste_forward_backward(net: &Network, batch: &[(&Tensor, usize)], m: &AxMultiplier) -> Result<(f32, Vec<Tensor>)> {
    forward_backward(net, batch, &ExecCtx::lut(m))
}

/// `p <- p - lr * (g + wd * p)` for every parameter not frozen.
pub fn sgd_step(net: &mut Network, state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
    let mut params = net.params_mut();
    if grads.len() != params.len() || state.frozen.len() != params.len() {
        bail!(Param, "{} gradients and {} flags for {} parameters", grads.len(), state.frozen.len(), params.len());
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            bail!(Param, "gradient {:?} does not match parameter {} {:?}", g.shape(), p.name, p.value.shape());
        }
    }
    if cfg.momentum > 0.0 && state.velocity.is_none() {
        state.velocity = Some(grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
    }
    let (lr, wd, mu) = (cfg.learning_rate, cfg.weight_decay, cfg.momentum);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if state.frozen[i] {
            continue;
        }
        match &mut state.velocity {
            Some(vel) if mu > 0.0 => {
                for ((w, &d), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel[i].data_mut()) {
                    *v = mu * *v + d + wd * *w;
                    *w -= lr * *v;
                }
            }
            _ => {
                for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (d + wd * *w);
                }
            }
        }
    }
    Ok(())
}

fn run_epoch(net: &mut Network, state: &mut TrainState, data: &Dataset, idx: &[usize], ctx_m: Option<&AxMultiplier>, cfg: &TrainConfig) -> Result<f32> {
    let mut order = idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let (mut loss_sum, mut batches) = (0.0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&data.inputs[i], data.labels[i])).collect();
        let (loss, grads) = match ctx_m {
            Some(m) => ste_forward_backward(net, &batch, m)?,
            None => float_forward_backward(net, &batch)?,
        };
        sgd_step(net, state, &grads, cfg)?;
        loss_sum += loss;
        batches += 1;
    }
    state.epoch += 1;
    let mean = loss_sum / batches.max(1) as f32;
    state.losses.push(mean);
    Ok(mean)
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, ctx: &ExecCtx<'_>) -> Result<f64> {
    accuracy(data, |x| model.forward(x, ctx))
}

pub fn evaluate_network(net: &Network, data: &Dataset, ctx: &ExecCtx<'_>) -> Result<f64> {
    accuracy(data, |x| net.forward(x, ctx))
}

fn accuracy(data: &Dataset, f: impl Fn(&Tensor) -> Result<Tensor> + Sync + Send) -> Result<f64> {
    if data.is_empty() {
        bail!(Param, "cannot evaluate on an empty dataset");
    }
    let hits = par::map_range(data.len(), |i| -> Result<bool> { Ok(argmax(f(&data.inputs[i])?.data()) == data.labels[i]) });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub eval_accuracy: f64,
}

/// Expert assignment of a class under cluster training: contiguous class
/// ranges, one per replica.
pub fn cluster_of(label: usize, classes: usize, experts: usize) -> usize {
    (label * experts / classes.max(1)).min(experts.saturating_sub(1))
}

/// Float training from the current parameters. Cluster models train the
/// gateway on class-range targets and each replica on its class range.
pub fn train(model: &mut Model, data: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Param, "cannot train on an empty dataset");
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    match model {
        Model::Single(net) => {
            let mut st = TrainState::new(net);
            for e in 0..cfg.epochs {
                let loss = run_epoch(net, &mut st, data, &all, None, cfg)?;
                metrics.push(EpochMetrics {
                    epoch: e + 1,
                    train_loss: loss,
                    eval_accuracy: evaluate_network(net, eval, &ExecCtx::float())?,
                });
            }
        }
        Model::Cluster(c) => {
            let n = c.replicas.len();
            let routed = Dataset {
                inputs: data.inputs.clone(),
                labels: data.labels.iter().map(|&y| cluster_of(y, data.classes, n)).collect(),
                classes: n,
            };
            let parts: Vec<Vec<usize>> = (0..n)
                .map(|j| all.iter().copied().filter(|&i| cluster_of(data.labels[i], data.classes, n) == j).collect())
                .collect();
            let mut gst = TrainState::with_frozen(&c.gateway, |k| k == ParamKind::Buffer);
            let mut rst: Vec<TrainState> = c.replicas.iter().map(TrainState::new).collect();
            for e in 0..cfg.epochs {
                let mut loss = run_epoch(&mut c.gateway, &mut gst, &routed, &all, None, cfg)?;
                for (j, r) in c.replicas.iter_mut().enumerate() {
                    if !parts[j].is_empty() {
                        loss += run_epoch(r, &mut rst[j], data, &parts[j], None, cfg)?;
                    }
                }
                metrics.push(EpochMetrics {
                    epoch: e + 1,
                    train_loss: loss / (n + 1) as f32,
                    eval_accuracy: 0.0,
                });
            }
            let acc = evaluate(model, eval, &ExecCtx::float())?;
            for m in &mut metrics {
                m.eval_accuracy = acc;
            }
        }
    }
    Ok(metrics)
}

/// Routing-decision change between two models on a probe set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    /// `(units, changed)` per MoE group; one entry for a cluster gateway.
    pub groups: Vec<(u64, u64)>,
}

impl DriftStats {
    pub fn units(&self) -> u64 {
        self.groups.iter().map(|g| g.0).sum()
    }

    pub fn changed(&self) -> u64 {
        self.groups.iter().map(|g| g.1).sum()
    }

    pub fn rate(&self) -> f64 {
        if self.units() == 0 {
            0.0
        } else {
            self.changed() as f64 / self.units() as f64
        }
    }
}

/// Routing decisions per probe: one list per MoE group (or the gateway).
pub fn routing_decisions(model: &Model, probe: &[Tensor], ctx: &ExecCtx<'_>) -> Result<Vec<Vec<Vec<usize>>>> {
    par::map(probe, |x| match model {
        Model::Single(n) => n.routing_decisions(x, ctx),
        Model::Cluster(c) => Ok(vec![vec![c.select(x, ctx)?]]),
    })
    .into_iter()
    .collect()
}

pub fn routing_drift(before: &Model, after: &Model, probe: &[Tensor], ctx: &ExecCtx<'_>) -> Result<DriftStats> {
    let a = routing_decisions(before, probe, ctx)?;
    let b = routing_decisions(after, probe, ctx)?;
    let mut stats = DriftStats::default();
    for (da, db) in a.iter().zip(&b) {
        if stats.groups.len() < da.len() {
            stats.groups.resize(da.len(), (0, 0));
        }
        for (g, (ua, ub)) in da.iter().zip(db).enumerate() {
            stats.groups[g].0 += ua.len() as u64;
            stats.groups[g].1 += ua.iter().zip(ub).filter(|(x, y)| x != y).count() as u64;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub multiplier: String,
    /// Accuracy under the multiplier before any update.
    pub baseline_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Largest absolute change over frozen parameters (always 0).
    pub frozen_max_delta: f32,
    /// Routing changes on the evaluation inputs, measured under `m`.
    pub drift: DriftStats,
}

impl RetrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(self.baseline_accuracy, |e| e.eval_accuracy)
    }
}

/// Approximate-aware retraining: `cfg.epochs` of straight-through SGD under
/// `m` with routers and the gateway frozen. Cluster replicas retrain on the
/// samples the (frozen) gateway sends them.
pub fn retrain(model: &mut Model, m: &AxMultiplier, data: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<RetrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Param, "cannot retrain on an empty dataset");
    }
    let ctx = ExecCtx::lut(m);
    let before = model.clone();
    let baseline_accuracy = evaluate(model, eval, &ctx)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    match model {
        Model::Single(net) => {
            let mut st = TrainState::for_retrain(net);
            for e in 0..cfg.epochs {
                let loss = run_epoch(net, &mut st, data, &all, Some(m), cfg)?;
                epochs.push(EpochMetrics {
                    epoch: e + 1,
                    train_loss: loss,
                    eval_accuracy: evaluate_network(net, eval, &ctx)?,
                });
            }
        }
        Model::Cluster(c) => {
            let sel = par::map_range(data.len(), |i| c.select(&data.inputs[i], &ctx));
            let mut parts: Vec<Vec<usize>> = vec![Vec::new(); c.replicas.len()];
            for (i, s) in sel.into_iter().enumerate() {
                parts[s?].push(i);
            }
            let mut rst: Vec<TrainState> = c.replicas.iter().map(TrainState::for_retrain).collect();
            for e in 0..cfg.epochs {
                let mut loss = 0.0;
                let mut k = 0;
                for (j, r) in c.replicas.iter_mut().enumerate() {
                    if !parts[j].is_empty() {
                        loss += run_epoch(r, &mut rst[j], data, &parts[j], Some(m), cfg)?;
                        k += 1;
                    }
                }
                let snapshot = Model::Cluster(c.clone());
                epochs.push(EpochMetrics {
                    epoch: e + 1,
                    train_loss: loss / k.max(1) as f32,
                    eval_accuracy: evaluate(&snapshot, eval, &ctx)?,
                });
            }
        }
    }
    let frozen_max_delta = frozen_delta(&before, model);
    let drift = routing_drift(&before, model, &eval.inputs, &ctx)?;
    Ok(RetrainReport {
        multiplier: m.name().to_string(),
        baseline_accuracy,
        epochs,
        frozen_max_delta,
        drift,
    })
}

/// Largest absolute change over router, gateway and buffer parameters.
pub fn frozen_delta(before: &Model, after: &Model) -> f32 {
    before
        .params()
        .iter()
        .zip(after.params())
        .filter(|(p, _)| matches!(p.kind, ParamKind::Router | ParamKind::Gateway | ParamKind::Buffer))
        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::axmul::build_exact_multiplier;
    use crate::data::{synthetic_blobs, SyntheticSpec};
    use crate::graph::Variant;
    use crate::moe::substitute_moe;

    fn mlp() -> Network {
        Network::from_graph(&arch::toy_mlp(vec![6], 5, 3).unwrap(), 4).unwrap()
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        synthetic_blobs(&SyntheticSpec {
            classes: 3,
            samples: n,
            shape: vec![6],
            noise: 0.5,
            seed,
        })
        .unwrap()
    }

    fn set_all(net: &mut Network, v: f32) {
        for p in net.params_mut() {
            p.value.data_mut().iter_mut().for_each(|w| *w = v);
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut net = mlp();
        set_all(&mut net, 1.0);
        let grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::full(p.value.shape(), 0.5)).collect();
        let mut st = TrainState::with_frozen(&net, |_| false);
        let cfg = TrainConfig { learning_rate: 0.1, weight_decay: 0.0, ..TrainConfig::default() };
        sgd_step(&mut net, &mut st, &grads, &cfg).unwrap();
        assert!(net.params().iter().all(|p| p.value.data().iter().all(|&w| (w - 0.95).abs() < 1e-7)));
    }

    #[test]
    fn weight_decay_shrinks_by_lr_wd() {
        let mut net = mlp();
        set_all(&mut net, 2.0);
        let grads = net.zero_grads();
        let mut st = TrainState::with_frozen(&net, |_| false);
        let cfg = TrainConfig { learning_rate: 0.1, weight_decay: 0.1, ..TrainConfig::default() };
        sgd_step(&mut net, &mut st, &grads, &cfg).unwrap();
        let want = 2.0 * (1.0 - 0.1 * 0.1);
        assert!(net.params().iter().all(|p| p.value.data().iter().all(|&w| (w - want).abs() < 1e-6)));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let g = substitute_moe(&arch::toy_mlp(vec![6], 5, 3).unwrap(), Variant::Soft, 3).unwrap();
        let mut net = Network::from_graph(&g, 1).unwrap();
        let before = Model::Single(net.clone());
        let d = blobs(24, 2);
        let batch: Vec<(&Tensor, usize)> = d.inputs.iter().zip(d.labels.iter().copied()).collect();
        let mut st = TrainState::for_retrain(&net);
        let cfg = TrainConfig { weight_decay: 0.01, ..TrainConfig::default() };
        for _ in 0..5 {
            let (_, grads) = float_forward_backward(&net, &batch).unwrap();
            sgd_step(&mut net, &mut st, &grads, &cfg).unwrap();
        }
        let after = Model::Single(net);
        assert_eq!(frozen_delta(&before, &after), 0.0);
        let moved = before
            .params()
            .iter()
            .zip(after.params())
            .any(|(p, q)| p.kind == ParamKind::Weight && p.value != q.value);
        assert!(moved);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = mlp();
        let d = blobs(6, 3);
        let batch: Vec<(&Tensor, usize)> = d.inputs.iter().zip(d.labels.iter().copied()).collect();
        let (_, grads) = float_forward_backward(&net, &batch).unwrap();
        let loss_at = |n: &Network| -> f64 {
            batch
                .iter()
                .map(|&(x, y)| {
                    let z = n.forward(x, &ExecCtx::float()).unwrap();
                    crate::net::cross_entropy(z.data(), y).unwrap().0 as f64
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let h = 1e-2f32;
        let mut checked = 0;
        for (pi, p) in net.params().iter().enumerate() {
            for k in (0..p.value.len()).step_by(2) {
                let mut plus = net.clone();
                plus.params_mut()[pi].value.data_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value.data_mut()[k] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h as f64);
                let an = grads[pi].data()[k] as f64;
                assert!((fd - an).abs() <= 1e-3 + 0.05 * fd.abs().max(an.abs()), "{} [{k}]: fd {fd} vs {an}", p.name);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let mut net = mlp();
        let d = blobs(60, 5);
        let batch: Vec<(&Tensor, usize)> = d.inputs.iter().zip(d.labels.iter().copied()).collect();
        let mut st = TrainState::new(&net);
        let cfg = TrainConfig { learning_rate: 0.2, ..TrainConfig::default() };
        let (first, _) = float_forward_backward(&net, &batch).unwrap();
        for _ in 0..50 {
            let (_, g) = float_forward_backward(&net, &batch).unwrap();
            sgd_step(&mut net, &mut st, &g, &cfg).unwrap();
        }
        let (last, _) = float_forward_backward(&net, &batch).unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn ste_with_exact_multiplier_tracks_float() {
        let net = mlp();
        let d = blobs(16, 6);
        let batch: Vec<(&Tensor, usize)> = d.inputs.iter().zip(d.labels.iter().copied()).collect();
        let (lf, gf) = float_forward_backward(&net, &batch).unwrap();
        let (ls, gs) = ste_forward_backward(&net, &batch, &build_exact_multiplier()).unwrap();
        assert!((lf - ls).abs() < 0.02 * lf.max(1.0), "{lf} vs {ls}");
        let dot: f64 = gf.iter().zip(&gs).flat_map(|(a, b)| a.data().iter().zip(b.data())).map(|(&a, &b)| (a * b) as f64).sum();
        let na: f64 = gf.iter().flat_map(|t| t.data()).map(|&a| (a * a) as f64).sum();
        let nb: f64 = gs.iter().flat_map(|t| t.data()).map(|&a| (a * a) as f64).sum();
        assert!(dot / (na.sqrt() * nb.sqrt()) > 0.99);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn cluster_ranges_are_contiguous() {
        let got: Vec<usize> = (0..10).map(|y| cluster_of(y, 10, 3)).collect();
        assert_eq!(got, vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }
}

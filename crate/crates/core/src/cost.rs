//! MAC accounting, approximate fraction, normalized power and Pareto
//! extraction over shape-only graphs.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{ArithmeticMode, Gateway, ModelGraph, Routing, Variant};
use crate::moe::{substitute_moe_with, MoeOptions};

/// Per-layer MAC breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub kind: String,
    /// MACs of one copy for one sample.
    pub macs: u64,
    /// Copies present in the model (experts).
    pub copies: u64,
    /// Copies executed per inference.
    pub executed: u64,
    pub approximate: bool,
    pub group: Option<usize>,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.macs * self.copies
    }

    pub fn effective(&self) -> u64 {
        self.macs * self.executed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub arch: String,
    pub variant: Variant,
    pub experts: usize,
    pub m_total: u64,
    pub m_eff: u64,
    pub m_approx: u64,
    pub f_apx: f64,
    /// Exact router MACs per inference (included in `m_total`/`m_eff`).
    pub router_macs: u64,
    /// Gateway MACs per inference (included in `m_total`/`m_eff`).
    pub gateway_macs: u64,
    pub params_total: u64,
    pub params_active: u64,
    pub layers: Vec<LayerMacs>,
}

impl MacReport {
    pub fn total_m(&self) -> f64 {
        self.m_total as f64 / 1e6
    }

    pub fn eff_m(&self) -> f64 {
        self.m_eff as f64 / 1e6
    }
}

fn gateway_cost(g: &Gateway, mode: ArithmeticMode) -> Result<(u64, u64, u64)> {
    Ok(match g {
        Gateway::Budget { macs } => (*macs, if mode == ArithmeticMode::Approximate { *macs } else { 0 }, 0),
        Gateway::Network { graph } => {
            let r = count_macs(graph)?;
            let approx = if mode == ArithmeticMode::Approximate {
                // every conv/linear except the exact routing head
                let last = graph.nodes.len() - 1;
                graph
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(i, n)| *i != last && n.spec.kind.may_approximate())
                    .map(|(_, n)| n.macs())
                    .sum()
            } else {
                0
            };
            (r.m_eff, approx, r.params_total)
        }
    })
}

/// Static and effective MACs of `g` as built (dense, MoE or cluster).
///
/// Conv and linear layers contribute `C_out*H_out*W_out*(C_in/G)*k_H*k_W` and
/// `tokens*in*out`; every other layer contributes nothing. A hard MoE layer
/// executes one expert per routed unit, a soft one all of them; routers add
/// `units*features*experts` exact MACs. A cluster model counts the gateway
/// once in both totals, all replicas in the static total and one replica in
/// the effective total.
pub fn count_macs(g: &ModelGraph) -> Result<MacReport> {
    g.validate()?;
    let mut layers = Vec::with_capacity(g.nodes.len());
    let (mut total, mut eff, mut approx) = (0u64, 0u64, 0u64);
    let (mut p_total, mut p_active) = (0u64, 0u64);
    for n in &g.nodes {
        let (copies, executed) = match n.group {
            None => (1, 1),
            Some(gid) => {
                let grp = &g.groups[gid];
                let e = grp.experts as u64;
                match grp.routing {
                    Routing::Hard => (e, 1),
                    Routing::Soft => (e, e),
                }
            }
        };
        let l = LayerMacs {
            name: n.name.clone(),
            kind: n.spec.kind.tag().to_string(),
            macs: n.macs(),
            copies,
            executed,
            approximate: n.is_approximate() || matches!(n.spec.kind, crate::graph::LayerKind::Attention { approx_matmuls: true, .. }),
            group: n.group,
        };
        total += l.total();
        eff += l.effective();
        if l.approximate {
            approx += l.effective();
        }
        p_total += n.params() * copies;
        p_active += n.params() * executed;
        layers.push(l);
    }
    let router: u64 = g.groups.iter().map(|grp| grp.router_macs()).sum();
    let router_params: u64 = g.groups.iter().map(|grp| grp.router_params()).sum();
    total += router;
    eff += router;
    p_total += router_params;
    p_active += router_params;
    let (mut experts, mut gateway_macs) = (g.groups.first().map_or(1, |grp| grp.experts), 0);
    if let Some(c) = &g.cluster {
        let (gm, ga, gp) = gateway_cost(&c.gateway, c.gateway_mode)?;
        experts = c.experts;
        gateway_macs = gm;
        total = gm + c.experts as u64 * total;
        eff += gm;
        approx += ga;
        p_total = gp + c.experts as u64 * p_total;
        p_active += gp;
    }
    let f_apx = if eff == 0 { 0.0 } else { (approx as f64 / eff as f64).min(1.0) };
    Ok(MacReport {
        arch: g.name.clone(),
        variant: g.variant,
        experts,
        m_total: total,
        m_eff: eff,
        m_approx: approx,
        f_apx,
        router_macs: router,
        gateway_macs,
        params_total: p_total,
        params_active: p_active,
        layers,
    })
}

/// Report for `variant` of the dense graph `a` with `n_exp` experts. For
/// cluster models `gateway_macs` replaces the gateway by a MAC budget.
pub fn effective_macs(a: &ModelGraph, variant: Variant, n_exp: usize, gateway_macs: Option<u64>) -> Result<MacReport> {
    effective_macs_with(
        a,
        variant,
        &MoeOptions {
            experts: n_exp,
            gateway: gateway_macs.map(|macs| Gateway::Budget { macs }),
            ..MoeOptions::default()
        },
    )
}

pub fn effective_macs_with(a: &ModelGraph, variant: Variant, opts: &MoeOptions) -> Result<MacReport> {
    count_macs(&substitute_moe_with(a, variant, opts)?)
}

/// `min(m_approx / m_eff, 1)`.
pub fn approx_fraction(report: &MacReport) -> Result<f64> {
    if report.m_eff == 0 {
        bail!(Param, "approximate fraction undefined for zero effective MACs");
    }
    Ok((report.m_approx as f64 / report.m_eff as f64).min(1.0))
}

/// `(m_eff / m_base) * (f_apx * p_apx / p_base + 1 - f_apx)`.
pub fn normalized_power(m_eff: f64, m_base: f64, f_apx: f64, p_apx: f64, p_base: f64) -> Result<f64> {
    if !(m_base > 0.0 && m_base.is_finite()) {
        bail!(Param, "base MACs must be positive, got {m_base}");
    }
    if !(p_base > 0.0 && p_base.is_finite()) {
        bail!(Param, "base power must be positive, got {p_base}");
    }
    if !(p_apx > 0.0 && p_apx.is_finite()) {
        bail!(Param, "multiplier power must be positive, got {p_apx}");
    }
    if !(m_eff >= 0.0 && m_eff.is_finite()) {
        bail!(Param, "effective MACs must be non-negative, got {m_eff}");
    }
    if !(0.0..=1.0).contains(&f_apx) {
        bail!(Param, "approximate fraction {f_apx} outside [0, 1]");
    }
    Ok((m_eff / m_base) * (f_apx * (p_apx / p_base) + (1.0 - f_apx)))
}

/// One operating point of a sweep; also the CSV row schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub arch: String,
    pub variant: String,
    pub multiplier: String,
    pub m_total: u64,
    pub m_eff: u64,
    pub f_apx: f64,
    pub p_norm: f64,
    pub top1: f64,
    pub retrained: bool,
    pub seed: u64,
}

/// `p` dominates `q`: no more power, no less accuracy, strictly better in one.
pub fn dominates(p: (f64, f64), q: (f64, f64)) -> bool {
    p.0 <= q.0 && p.1 >= q.1 && (p.0 < q.0 || p.1 > q.1)
}

/// Indices of the non-dominated `(p_norm, top1)` pairs, sorted by power
/// ascending (input order among equal powers).
pub fn pareto_indices(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        bail!(Param, "Pareto frontier of an empty set");
    }
    if points.iter().any(|(p, a)| p.is_nan() || a.is_nan()) {
        bail!(Param, "Pareto points must not be NaN");
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut keep = Vec::new();
    let mut best_lower = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let p = points[order[i]].0;
        let group_max = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == p {
            if points[order[j]].1 == group_max && group_max > best_lower {
                keep.push(order[j]);
            }
            j += 1;
        }
        best_lower = best_lower.max(group_max);
        i = j;
    }
    keep.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    Ok(keep)
}

pub fn pareto_frontier(points: &[SweepPoint]) -> Result<Vec<SweepPoint>> {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.p_norm, p.top1)).collect();
    Ok(pareto_indices(&pairs)?.into_iter().map(|i| points[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use proptest::prelude::*;

    #[test]
    fn toy_mlp_macs() {
        let g = arch::toy_mlp(vec![784], 32, 10).unwrap();
        assert_eq!(count_macs(&g).unwrap().m_total, 784 * 32 + 32 * 10);
    }

    #[test]
    fn dense_effective_equals_total() {
        for name in arch::ARCH_NAMES {
            let r = count_macs(&arch::build(name, None, None).unwrap()).unwrap();
            assert_eq!(r.m_eff, r.m_total, "{name}");
        }
    }

    #[test]
    fn all_exact_has_zero_fraction() {
        let g = arch::with_mode(arch::resnet20(100).unwrap(), ArithmeticMode::Exact);
        let r = count_macs(&g).unwrap();
        assert_eq!(approx_fraction(&r).unwrap(), 0.0);
    }

    #[test]
    fn single_expert_matches_dense() {
        let base = arch::toy_cnn(vec![3, 16, 16], 10).unwrap();
        let dense = count_macs(&base).unwrap();
        for v in [Variant::Hard, Variant::Soft] {
            let r = effective_macs(&base, v, 1, None).unwrap();
            assert_eq!(r.m_eff, dense.m_eff);
            assert_eq!(r.m_approx, dense.m_approx);
        }
    }

    #[test]
    fn power_reference_and_errors() {
        assert_eq!(normalized_power(5.0, 5.0, 0.37, 0.425, 0.425).unwrap(), 1.0);
        assert!(normalized_power(1.0, 0.0, 0.5, 0.3, 0.4).is_err());
        assert!(normalized_power(1.0, 1.0, 1.5, 0.3, 0.4).is_err());
        let zero = MacReport {
            m_eff: 0,
            ..count_macs(&arch::toy_mlp(vec![4], 2, 2).unwrap()).unwrap()
        };
        assert!(approx_fraction(&zero).is_err());
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_indices(&[(0.5, 70.0)]).unwrap(), vec![0]);
        assert_eq!(pareto_indices(&[(0.5, 70.0), (0.5, 60.0)]).unwrap(), vec![0]);
        assert_eq!(pareto_indices(&[(0.9, 80.0), (0.4, 50.0), (0.6, 50.0)]).unwrap(), vec![1, 0]);
        assert!(pareto_indices(&[]).is_err());
    }

    fn oracle(points: &[(f64, f64)]) -> Vec<usize> {
        let mut v: Vec<usize> = (0..points.len())
            .filter(|&i| !points.iter().any(|&q| dominates(q, points[i])))
            .collect();
        v.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
        v
    }

    proptest! {
        #[test]
        fn frontier_matches_pairwise_oracle(pts in prop::collection::vec((0u8..20, 0u8..20), 1..60)) {
            // small integer grids force ties in both coordinates
            let points: Vec<(f64, f64)> = pts.iter().map(|&(p, a)| (p as f64 / 10.0, a as f64)).collect();
            prop_assert_eq!(pareto_indices(&points).unwrap(), oracle(&points));
        }

        #[test]
        fn power_monotone(m in 1.0f64..1e9, f in 0.0f64..=1.0, p1 in 0.1f64..0.425, p2 in 0.1f64..0.425) {
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            let a = normalized_power(m, 1e9, f, lo, 0.425).unwrap();
            let b = normalized_power(m, 1e9, f, hi, 0.425).unwrap();
            prop_assert!(a <= b);
            let c = normalized_power(m * 1.5, 1e9, f, lo, 0.425).unwrap();
            prop_assert!(c >= a);
        }
    }
}

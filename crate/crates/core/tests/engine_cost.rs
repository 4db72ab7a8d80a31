//! Runtime counters against the static cost model on executable toy graphs.

use lutmoe::arch::{self, VitConfig};
use lutmoe::axmul::build_truncation_multiplier;
use lutmoe::cost::count_macs;
use lutmoe::data::{synthetic_blobs, SyntheticSpec};
use lutmoe::graph::Granularity;
use lutmoe::moe::{substitute_moe_with, MoeOptions};
use lutmoe::{ExecCtx, ExecStats, Model, ModelGraph, Tensor, Variant};

fn inputs(shape: &[usize], n: usize) -> Vec<Tensor> {
    synthetic_blobs(&SyntheticSpec {
        classes: 4,
        samples: n,
        shape: shape.to_vec(),
        noise: 1.0,
        seed: 9,
    })
    .unwrap()
    .inputs
}

fn tiny_vit() -> ModelGraph {
    arch::vit(&VitConfig {
        image: 8,
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp: 16,
        classes: 3,
        approx_attention_matmuls: true,
    })
    .unwrap()
}

fn graphs() -> Vec<ModelGraph> {
    let cnn = arch::toy_cnn(vec![3, 8, 8], 4).unwrap();
    let mlp = arch::toy_mlp(vec![3, 4, 4], 12, 4).unwrap();
    let vit = tiny_vit();
    let mut out = Vec::new();
    for base in [&cnn, &mlp] {
        for v in [Variant::Dense, Variant::Hard, Variant::Soft, Variant::Cluster] {
            out.push(substitute_moe_with(base, v, &MoeOptions::default()).unwrap());
        }
    }
    for v in [Variant::Dense, Variant::Hard, Variant::Soft] {
        for gran in [Granularity::PerSample, Granularity::PerToken] {
            let opts = MoeOptions {
                ratio: Some(0.5),
                granularity: Some(gran),
                ..MoeOptions::default()
            };
            out.push(substitute_moe_with(&vit, v, &opts).unwrap());
        }
    }
    out
}

#[test]
fn counters_equal_cost_model_per_node() {
    let m = build_truncation_multiplier(2, 0.3).unwrap();
    for g in graphs() {
        let report = count_macs(&g).unwrap();
        let model = Model::from_graph(&g, 3).unwrap();
        let xs = inputs(&g.input, 5);
        let n = xs.len() as u64;
        let stats = ExecStats::for_graph(&g);
        let ctx = ExecCtx::lut(&m).with_stats(&stats);
        for x in &xs {
            model.forward(x, &ctx).unwrap();
        }
        let s = stats.snapshot();
        let label = format!("{} {}", g.name, g.variant);
        if g.cluster.is_none() {
            for (i, l) in report.layers.iter().enumerate() {
                assert_eq!(s.macs[i], n * l.effective(), "{label}: macs of {}", l.name);
                let want_lut = if l.approximate { n * l.effective() } else { 0 };
                assert_eq!(s.lut[i], want_lut, "{label}: lookups of {}", l.name);
            }
            assert_eq!(s.router_macs.iter().sum::<u64>(), n * report.router_macs, "{label}");
        } else {
            assert_eq!(s.gateway_runs, n, "{label}");
            assert_eq!(s.replica_calls.iter().sum::<u64>(), n, "{label}");
        }
        assert_eq!(s.total_macs(), n * report.m_eff, "{label}: effective MACs");
        assert_eq!(s.total_lut(), n * report.m_approx, "{label}: approximate MACs");
    }
}

#[test]
fn hard_groups_call_one_expert_per_unit() {
    let m = build_truncation_multiplier(2, 0.3).unwrap();
    let vit = tiny_vit();
    let opts = MoeOptions {
        ratio: Some(0.5),
        granularity: Some(Granularity::PerToken),
        ..MoeOptions::default()
    };
    let g = substitute_moe_with(&vit, Variant::Hard, &opts).unwrap();
    let model = Model::from_graph(&g, 1).unwrap();
    let stats = ExecStats::for_graph(&g);
    let x = &inputs(&g.input, 1)[0];
    model.forward(x, &ExecCtx::lut(&m).with_stats(&stats)).unwrap();
    let s = stats.snapshot();
    for (gid, calls) in s.expert_calls.iter().enumerate() {
        assert_eq!(calls.iter().sum::<u64>(), g.groups[gid].units as u64);
    }
}

#[test]
fn float_runs_make_no_lookups() {
    let g = substitute_moe_with(&arch::toy_cnn(vec![3, 8, 8], 4).unwrap(), Variant::Soft, &MoeOptions::default()).unwrap();
    let model = Model::from_graph(&g, 2).unwrap();
    let stats = ExecStats::for_graph(&g);
    model.forward(&inputs(&g.input, 1)[0], &ExecCtx::float().with_stats(&stats)).unwrap();
    let s = stats.snapshot();
    assert_eq!(s.total_lut(), 0);
    assert_eq!(s.total_macs(), count_macs(&g).unwrap().m_eff);
}

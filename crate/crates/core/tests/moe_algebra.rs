//! Algebraic properties of hard and soft routing over random instances.

use lutmoe::arch;
use lutmoe::graph::Granularity;
use lutmoe::moe::{route_hard, route_soft, substitute_moe, Router};
use lutmoe::net::argmax;
use lutmoe::ops::softmax;
use lutmoe::{ExecCtx, ExecStats, Network, Tensor, Variant};
use proptest::prelude::*;

const IN: usize = 6;

fn vecf(n: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(lo..hi, n)
}

fn moe_net(v: Variant, n: usize, seed: u64) -> Network {
    Network::from_graph(&substitute_moe(&arch::toy_mlp(vec![IN], 5, 3).unwrap(), v, n).unwrap(), seed).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tied_soft_equals_dense(seed in 0u64..1000, n in 2usize..5, x in vecf(IN, -2.0, 2.0)) {
        let mut soft = moe_net(Variant::Soft, n, seed);
        soft.moe_layers_mut()[0].experts.tie_to_first();
        let mut dense = Network::from_graph(&arch::toy_mlp(vec![IN], 5, 3).unwrap(), seed + 1).unwrap();
        let src: Vec<(String, Tensor)> = soft.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for p in dense.params_mut() {
            let want = if p.name.starts_with("hidden") { format!("e0.{}", p.name) } else { p.name.clone() };
            p.value = src.iter().find(|(n, _)| *n == want).unwrap().1.clone();
        }
        let x = Tensor::from_vec(x);
        let a = soft.forward(&x, &ExecCtx::float()).unwrap();
        let b = dense.forward(&x, &ExecCtx::float()).unwrap();
        prop_assert!(close(a.data(), b.data(), 1e-5), "{:?} vs {:?}", a.data(), b.data());
    }

    #[test]
    fn one_hot_soft_equals_hard(seed in 0u64..1000, w in vecf(3 * IN, -1.0, 1.0), x in vecf(IN, -2.0, 2.0)) {
        let net = moe_net(Variant::Soft, 3, seed);
        let layer = net.moe_layers()[0].clone();
        let router = Router::new(Tensor::new(vec![3, IN], w.iter().map(|v| v * 1e4).collect()).unwrap(), Granularity::PerSample).unwrap();
        let x = Tensor::from_vec(x);
        let gate = router.gate(x.data()).unwrap();
        prop_assume!(gate.contains(&1.0));
        let s = route_soft(&x, &layer.experts, &router, &ExecCtx::float()).unwrap();
        let h = route_hard(&x, &layer.experts, &router, &ExecCtx::float()).unwrap();
        prop_assert!(close(s.output.data(), h.output.data(), 1e-6));
    }

    #[test]
    fn hard_runs_exactly_one_expert(seed in 0u64..1000, n in 2usize..6, x in vecf(IN, -2.0, 2.0)) {
        let net = moe_net(Variant::Hard, n, seed);
        let stats = ExecStats::for_graph(net.graph());
        let x = Tensor::from_vec(x);
        net.forward(&x, &ExecCtx::float().with_stats(&stats)).unwrap();
        let calls = stats.snapshot().expert_calls;
        prop_assert_eq!(calls[0].iter().sum::<u64>(), 1);
        let layer = &net.moe_layers()[0];
        let r = route_hard(&x, &layer.experts, &layer.router, &ExecCtx::float()).unwrap();
        prop_assert_eq!(r.calls.iter().filter(|&&c| c > 0).count(), 1);
        prop_assert_eq!(r.calls[argmax(&r.gates[0])], 1);
    }

    #[test]
    fn gates_sum_to_one(n in 1usize..8, w in vecf(8 * IN, -5.0, 5.0), x in vecf(IN, -3.0, 3.0)) {
        let router = Router::new(Tensor::new(vec![n, IN], w[..n * IN].to_vec()).unwrap(), Granularity::PerSample).unwrap();
        let g = router.gate(&x).unwrap();
        prop_assert_eq!(g.len(), n);
        prop_assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((g.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn logit_shift_keeps_argmax(z in vecf(5, -10.0, 10.0), c in -50.0f32..50.0) {
        let shifted: Vec<f32> = z.iter().map(|v| v + c).collect();
        let a = softmax(&Tensor::from_vec(z.clone())).unwrap();
        let b = softmax(&Tensor::from_vec(shifted)).unwrap();
        prop_assert_eq!(argmax(a.data()), argmax(&z));
        prop_assert_eq!(argmax(b.data()), argmax(&z));
        prop_assert!(close(a.data(), b.data(), 1e-5));
    }

    #[test]
    fn common_row_offset_keeps_decisions(w in vecf(3 * IN, -1.0, 1.0), u in vecf(IN, -1.0, 1.0), x in vecf(IN, -2.0, 2.0)) {
        // adding the same vector to every router row shifts all logits equally
        let shifted: Vec<f32> = w.chunks(IN).flat_map(|row| row.iter().zip(&u).map(|(a, b)| a + b)).collect();
        let r0 = Router::new(Tensor::new(vec![3, IN], w).unwrap(), Granularity::PerSample).unwrap();
        let r1 = Router::new(Tensor::new(vec![3, IN], shifted).unwrap(), Granularity::PerSample).unwrap();
        let (g0, g1) = (r0.gate(&x).unwrap(), r1.gate(&x).unwrap());
        let l0 = r0.logits(&x).unwrap();
        let mut sorted = l0.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-3);
        prop_assert_eq!(argmax(&g0), argmax(&g1));
        prop_assert!(close(&g0, &g1, 1e-4));
    }
}

#[test]
fn soft_calls_every_expert() {
    let net = moe_net(Variant::Soft, 4, 7);
    let stats = ExecStats::for_graph(net.graph());
    net.forward(&Tensor::from_vec(vec![0.5; IN]), &ExecCtx::float().with_stats(&stats)).unwrap();
    assert_eq!(stats.snapshot().expert_calls[0], vec![1, 1, 1, 1]);
}

use adamole::gating::{adaptive_weights, threshold_weights, topk_weights};
use adamole::moe_layer::{count_active, AdaMoleLinear, AdapterConfig, MixMode};
use adamole::numeric::{softmax, Matrix};
use adamole::oracle::{brute_force_topk, replay_average};
use adamole::telemetry::{ActivationStats, Projection};
use adamole::training::argmax;
use adamole::LoraExpert;
use proptest::prelude::*;

fn probs(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 1..=max_n).prop_map(|z| softmax(&z).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn check_mix_invariants(p: &[f64], w: &adamole::MixWeights) -> Result<(), TestCaseError> {
    for (i, (&wi, &on)) in w.weights.iter().zip(&w.active_mask).enumerate() {
        if !on {
            prop_assert_eq!(wi, 0.0, "inactive expert {} has weight", i);
        }
        prop_assert!(wi >= 0.0);
    }
    prop_assert_eq!(w.active_count, w.active_mask.iter().filter(|&&m| m).count());
    let sum: f64 = w.weights.iter().sum();
    if sum > 0.0 {
        prop_assert!((sum - 1.0).abs() <= 1e-10, "sum {} for p {:?}", sum, p);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-30.0..30.0f64, 1..16), shift in -50.0..50.0f64) {
        let p = softmax(&z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn lora_is_linear_and_zero_at_init(a in matrix(2, 5), b in matrix(4, 2), x in matrix(3, 5), y in matrix(3, 5), seed in any::<u64>()) {
        let mut e = LoraExpert::new(4, 5, 2, 4.0, seed).unwrap();
        let z = Matrix::zeros(3, 4);
        prop_assert_eq!(e.eval(&x).unwrap(), z);
        e.a.value = a;
        e.b.value = b;
        let sum = e.eval(&x).unwrap().add(&e.eval(&y).unwrap()).unwrap();
        let joint = e.eval(&x.add(&y).unwrap()).unwrap();
        prop_assert!(sum.sub(&joint).unwrap().max_abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn mixing_rules_keep_invariants(p in probs(8), tau in 0.0..1.0f64, k in 1usize..=8) {
        check_mix_invariants(&p, &threshold_weights(&p, tau))?;
        check_mix_invariants(&p, &adaptive_weights(&p, tau))?;
        let k = k.min(p.len());
        let top = topk_weights(&p, k).unwrap();
        check_mix_invariants(&p, &top)?;
        prop_assert_eq!(top.active_count, k);
    }

    #[test]
    fn topk_matches_sort_oracle(p in probs(8), k in 1usize..=8) {
        let k = k.min(p.len());
        prop_assert_eq!(topk_weights(&p, k).unwrap(), brute_force_topk(&p, k).unwrap());
    }

    #[test]
    fn topk_matches_oracle_with_ties(raw in prop::collection::vec(0u8..4, 1..=8), k in 1usize..=8) {
        let total: f64 = raw.iter().map(|&r| r as f64 + 1.0).sum();
        let p: Vec<f64> = raw.iter().map(|&r| (r as f64 + 1.0) / total).collect();
        let k = k.min(p.len());
        prop_assert_eq!(topk_weights(&p, k).unwrap(), brute_force_topk(&p, k).unwrap());
    }

    #[test]
    fn active_count_is_monotone_in_tau(p in probs(8), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(threshold_weights(&p, lo).active_count >= threshold_weights(&p, hi).active_count);
        prop_assert!(adaptive_weights(&p, lo).active_count >= adaptive_weights(&p, hi).active_count);
    }

    #[test]
    fn small_threshold_always_activates(p in probs(8), frac in 0.0..=1.0f64) {
        let tau = frac / p.len() as f64;
        prop_assert!(threshold_weights(&p, tau).active_count >= 1);
        prop_assert!(adaptive_weights(&p, tau).active_count >= 1);
    }

    #[test]
    fn adaptive_keeps_argmax(p in probs(8), tau in 0.0..0.5f64) {
        let top = argmax(&p);
        let runner_up = p.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| v).fold(0.0, f64::max);
        prop_assume!(p[top] - runner_up > 1e-9 && p[top] > tau);
        prop_assert_eq!(adaptive_weights(&p, tau).top_expert(), Some(top));
    }

    #[test]
    fn zero_threshold_reproduces_softmax(p in probs(8)) {
        let fixed = threshold_weights(&p, 0.0);
        let adaptive = adaptive_weights(&p, 0.0);
        let top_all = topk_weights(&p, p.len()).unwrap();
        for i in 0..p.len() {
            prop_assert!((fixed.weights[i] - p[i]).abs() <= 1e-12);
            prop_assert!((adaptive.weights[i] - p[i]).abs() <= 1e-12);
            prop_assert!((top_all.weights[i] - p[i]).abs() <= 1e-12);
        }
    }
}

fn random_layer(mode: MixMode, n: usize, seed: u64, w_scale: f64) -> AdaMoleLinear {
    let w0 = adamole::numeric::gaussian_init(5, 6, 0.4, seed, "w0").unwrap();
    let cfg = AdapterConfig {
        n_experts: n,
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
        mode,
    };
    let mut layer = AdaMoleLinear::new(w0, &cfg, seed).unwrap();
    if let Some(g) = layer.gate.as_mut() {
        g.w_g.value = adamole::numeric::gaussian_init(n, 6, w_scale, seed, "gate").unwrap();
    }
    if let Some(t) = layer.threshold.as_mut() {
        t.w_tau.value = adamole::numeric::gaussian_init(1, 6, w_scale, seed, "tau").unwrap();
        t.b_tau.value = adamole::numeric::gaussian_init(1, 1, 1.0, seed, "bias").unwrap();
    }
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn every_mode_starts_at_the_base_output(x in matrix(4, 6), seed in any::<u64>(), n in 2usize..6) {
        for (mode, experts) in [
            (MixMode::SingleLora, 1),
            (MixMode::TopK { k: 2 }, n),
            (MixMode::FixedThreshold { tau: 0.1 }, n),
            (MixMode::Adaptive { tau_max: 1.0 / n as f64 }, n),
        ] {
            let w0 = adamole::numeric::gaussian_init(5, 6, 0.4, seed, "w0").unwrap();
            let base = x.matmul_nt(&w0).unwrap();
            let cfg = AdapterConfig { n_experts: experts, rank: 2, alpha: 4.0, dropout: 0.0, mode };
            let layer = AdaMoleLinear::new(w0, &cfg, seed).unwrap();
            let (h, _) = layer.eval(&x).unwrap();
            prop_assert_eq!(h, base.clone());
        }
    }

    #[test]
    fn clamped_adaptive_matches_fixed_active_set(x in matrix(4, 6), seed in any::<u64>(), frac in 0.05..0.95f64) {
        let n = 4;
        let tau_max = 0.5;
        let tau = frac * tau_max;
        let mut adaptive = random_layer(MixMode::Adaptive { tau_max }, n, seed, 1.0);
        let th = adaptive.threshold.as_mut().unwrap();
        th.w_tau.value.fill(0.0);
        // sigmoid(b) = frac
        th.b_tau.value.fill((frac / (1.0 - frac)).ln());
        let mut fixed = random_layer(MixMode::FixedThreshold { tau }, n, seed, 1.0);
        fixed.gate = adaptive.gate.clone();
        let (_, ra) = adaptive.eval(&x).unwrap();
        let (_, rf) = fixed.eval(&x).unwrap();
        for (a, f) in ra.iter().zip(&rf) {
            let t = a.tau.unwrap();
            prop_assume!(a.p.iter().all(|&p| (p - t).abs() > 1e-9));
            prop_assert_eq!(&a.weights.active_mask, &f.weights.active_mask);
        }
    }

    #[test]
    fn topk_n_weights_equal_gate_probs(x in matrix(3, 6), seed in any::<u64>()) {
        let layer = random_layer(MixMode::TopK { k: 4 }, 4, seed, 1.0);
        let (_, recs) = layer.eval(&x).unwrap();
        for r in recs {
            for (w, p) in r.weights.weights.iter().zip(&r.p) {
                prop_assert!((w - p).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn larger_tau_max_never_activates_more(x in matrix(1, 6), seed in 0u64..64, a in 0.01..1.0f64, b in 0.01..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut layer = random_layer(MixMode::Adaptive { tau_max: lo }, 6, seed, 1.0);
        let (_, small) = layer.eval(&x).unwrap();
        layer.set_tau_max(hi).unwrap();
        let (_, large) = layer.eval(&x).unwrap();
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(count_active(l) <= count_active(s));
        }
    }
}

#[test]
fn adapter_budget_is_fixed_by_total_rank() {
    let w0 = Matrix::zeros(32, 48);
    let counts: Vec<usize> = [(1, 32), (2, 16), (4, 8), (8, 4), (32, 1)]
        .iter()
        .map(|&(n, r)| {
            let mode = if n == 1 { MixMode::SingleLora } else { MixMode::Adaptive { tau_max: 1.0 / n as f64 } };
            let cfg = AdapterConfig { n_experts: n, rank: r, alpha: 16.0, dropout: 0.0, mode };
            AdaMoleLinear::new(w0.clone(), &cfg, 0).unwrap().adapter_param_count()
        })
        .collect();
    assert!(counts.iter().all(|&c| c == 32 * (32 + 48)), "{counts:?}");
}

fn record_stream() -> impl Strategy<Value = Vec<(usize, Projection, usize)>> {
    let proj = prop::sample::select(Projection::ALL.to_vec());
    prop::collection::vec((0usize..3, proj, 0usize..=8), 0..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn telemetry_matches_replay(records in record_stream(), split in 0usize..200) {
        let mut stats = ActivationStats::new(3, 8);
        for &(l, p, c) in &records {
            stats.record(l, p, c).unwrap();
        }
        let replay = replay_average(&records);
        prop_assert_eq!(stats.global_average(), replay.global);
        for l in 0..3 {
            for p in Projection::ALL {
                prop_assert_eq!(stats.average(l, p), replay.cells.get(&(l, p)).copied());
                if let Some(a) = stats.average(l, p) {
                    prop_assert!((0.0..=8.0).contains(&a));
                }
            }
        }

        let cut = split.min(records.len());
        let (left, right) = records.split_at(cut);
        let mut a = ActivationStats::new(3, 8);
        let mut b = ActivationStats::new(3, 8);
        left.iter().for_each(|&(l, p, c)| a.record(l, p, c).unwrap());
        right.iter().for_each(|&(l, p, c)| b.record(l, p, c).unwrap());
        prop_assert_eq!(a.merge(&b).unwrap(), stats);
    }
}

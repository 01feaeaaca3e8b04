use proptest::prelude::*;
use synmoe_core::gradcheck::{grad_check_with, GradCheckOptions};
use synmoe_core::moe::{
    build_schedule, expert_forward, expert_forward_on, load_balance_loss, moe_forward,
    moe_forward_on, route, upcycle_from_dense, ExpertFFN, ExpertVars, MoELayer, MoEVars,
    PlacementMode, Router,
};
use synmoe_core::rng::{stream, Rng};
use synmoe_core::{Tape, Tensor, Var};

fn random_layer(d: usize, h: usize, m: usize, k: usize, rng: &mut Rng) -> MoELayer {
    let experts = (0..m).map(|_| ExpertFFN::random(d, h, 1.0, rng)).collect();
    let router = Router {
        weight: Tensor::randn(&[d, m], 1.0, rng),
    };
    MoELayer::new(router, experts, k).unwrap()
}

/// softmax, then top-k with ties to the lowest index, then renormalize; one
/// token at a time with plain loops.
fn scalar_route(x: &Tensor, w: &Tensor, k: usize) -> Vec<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let (t, d) = (x.rows(), x.cols());
    let m = w.cols();
    (0..t)
        .map(|r| {
            let mut logits = vec![0.0; m];
            for (e, l) in logits.iter_mut().enumerate() {
                for c in 0..d {
                    *l += x.at(r, c) * w.at(c, e);
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let sel: Vec<usize> = order[..k].to_vec();
            let s: f64 = sel.iter().map(|&e| probs[e]).sum();
            let weights = sel.iter().map(|&e| probs[e] / s).collect();
            (probs, sel, weights)
        })
        .collect()
}

#[test]
fn routing_matches_scalar_oracle() {
    let mut rng = stream(11, "route-oracle");
    for _ in 0..20 {
        let layer = random_layer(6, 8, 4, 2, &mut rng);
        let x = Tensor::randn(&[12, 6], 1.0, &mut rng);
        let rec = route(&x, &layer).unwrap();
        let oracle = scalar_route(&x, &layer.router.weight, 2);
        for (t, (p, sel, w)) in oracle.iter().enumerate() {
            for e in 0..4 {
                assert!((rec.probs.at(t, e) - p[e]).abs() <= 1e-12);
            }
            assert_eq!(&rec.selected[t], sel);
            for (a, b) in rec.weights[t].iter().zip(w) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

/// Two passes: count argmaxes, then average columns.
fn scalar_load_balance(probs: &Tensor) -> f64 {
    let (t, m) = (probs.rows(), probs.cols());
    let mut counts = vec![0usize; m];
    for r in 0..t {
        let mut best = 0;
        for e in 1..m {
            if probs.at(r, e) > probs.at(r, best) {
                best = e;
            }
        }
        counts[best] += 1;
    }
    let mut loss = 0.0;
    for e in 0..m {
        let mut g = 0.0;
        for r in 0..t {
            g += probs.at(r, e);
        }
        loss += (counts[e] as f64 / t as f64) * (g / t as f64);
    }
    m as f64 * loss
}

#[test]
fn load_balance_matches_scalar_oracle() {
    let mut rng = stream(12, "aux-oracle");
    for _ in 0..10 {
        let layer = random_layer(8, 4, 4, 2, &mut rng);
        let x = Tensor::randn(&[100, 8], 1.0, &mut rng);
        let rec = route(&x, &layer).unwrap();
        let got = load_balance_loss(&rec, 4).unwrap();
        let want = scalar_load_balance(&rec.probs);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn load_balance_closed_forms() {
    let mut rng = stream(13, "aux-closed");
    let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
    let uniform = MoELayer::new(
        Router::zeros(8, 4),
        (0..4).map(|_| ExpertFFN::zeros(8, 4)).collect(),
        2,
    )
    .unwrap();
    assert_eq!(
        load_balance_loss(&route(&x, &uniform).unwrap(), 4).unwrap(),
        1.0
    );

    let mut collapsed = uniform.clone();
    let ones = Tensor::full(&[16, 8], 1.0);
    for r in 0..8 {
        collapsed.router.weight.data_mut()[r * 4] = 1000.0;
    }
    let l = load_balance_loss(&route(&ones, &collapsed).unwrap(), 4).unwrap();
    assert!((l - 4.0).abs() <= 1e-9, "{l}");
}

fn weighted_sum(tape: &mut Tape, y: Var, probe: &Tensor) -> synmoe_core::Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(y, p)?;
    tape.sum(prod)
}

#[test]
fn expert_gradients_match_finite_differences() {
    let mut rng = stream(14, "expert-grad");
    for _ in 0..20 {
        let e = ExpertFFN::random(4, 8, 1.0, &mut rng);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let report = grad_check_with(
            |tape, v| {
                let xv = tape.constant(x.clone());
                let ev = ExpertVars {
                    gate: v[0],
                    up: v[1],
                    down: v[2],
                };
                let y = expert_forward_on(tape, xv, &ev)?;
                weighted_sum(tape, y, &probe)
            },
            &[e.w_gate.clone(), e.w_up.clone(), e.w_down.clone()],
            GradCheckOptions {
                eps: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}

#[test]
fn moe_gradients_match_finite_differences_away_from_ties() {
    let mut rng = stream(15, "moe-grad");
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 20 {
        let layer = random_layer(4, 6, 4, 2, &mut rng);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let probe = Tensor::randn(&[5, 4], 1.0, &mut rng);
        if route(&x, &layer).unwrap().decision_margin() < 1e-3 {
            continue;
        }
        let mut params = vec![x.clone(), layer.router.weight.clone()];
        for e in &layer.experts {
            params.extend([e.w_gate.clone(), e.w_up.clone(), e.w_down.clone()]);
        }
        let report = grad_check_with(
            |tape, v| {
                let vars = MoEVars {
                    router: v[1],
                    experts: v[2..]
                        .chunks(3)
                        .map(|c| ExpertVars {
                            gate: c[0],
                            up: c[1],
                            down: c[2],
                        })
                        .collect(),
                };
                let out = moe_forward_on(tape, v[0], &vars, 2, true)?;
                weighted_sum(tape, out.y, &probe)
            },
            &params,
            GradCheckOptions {
                eps: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        worst = worst.max(report.max_rel_err);
        checked += 1;
    }
    assert!(worst < 1e-4, "worst rel err {worst:e}");
}

#[test]
fn sparse_forward_evaluates_k_experts_per_token() {
    let mut rng = stream(16, "sparsity");
    for k in 1..=4 {
        let layer = random_layer(6, 8, 4, k, &mut rng);
        let x = Tensor::randn(&[9, 6], 1.0, &mut rng);
        let (_, rec) = moe_forward(&x, &layer).unwrap();
        assert_eq!(rec.total_expert_evals(), 9 * k);
    }
}

#[test]
fn upcycled_layer_reproduces_dense_for_every_k() {
    let mut rng = stream(17, "upcycle");
    let dense = ExpertFFN::random(8, 16, 1.0, &mut rng);
    for k in 1..=4 {
        let layer = upcycle_from_dense(&dense, 4, k, 0.0, 3).unwrap();
        for e in &layer.experts {
            assert_eq!(e, &dense);
        }
        let x = Tensor::randn(&[7, 8], 2.0, &mut rng);
        let (y, rec) = moe_forward(&x, &layer).unwrap();
        let want = expert_forward(&x, &dense).unwrap();
        assert!(y.max_abs_diff(&want) <= 1e-12);
        assert_eq!(load_balance_loss(&rec, 4).unwrap(), 1.0);
    }
    let a = upcycle_from_dense(&dense, 4, 2, 0.1, 9).unwrap();
    let b = upcycle_from_dense(&dense, 4, 2, 0.1, 9).unwrap();
    assert_eq!(a, b);
    assert!(upcycle_from_dense(&dense, 4, 2, -1.0, 9).is_err());
}

#[test]
fn schedules_match_layer_counts() {
    let s = build_schedule(28, PlacementMode::Interval(4)).unwrap();
    assert_eq!(s.moe_layer_indices, vec![0, 4, 8, 12, 16, 20, 24]);
    assert_eq!(s.count(), 7);
    let first = build_schedule(28, PlacementMode::FirstHalf).unwrap();
    assert_eq!(first.moe_layer_indices, (0..14).collect::<Vec<_>>());
    let last = build_schedule(28, PlacementMode::LastHalf).unwrap();
    assert_eq!(last.moe_layer_indices, (14..28).collect::<Vec<_>>());
    assert_eq!(build_schedule(4, PlacementMode::Full).unwrap().count(), 4);
    assert!(build_schedule(0, PlacementMode::Full).is_err());
    for l in 1..40 {
        for mode in PlacementMode::ABLATION {
            let s = build_schedule(l, mode).unwrap();
            assert!(s.moe_layer_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(s.moe_layer_indices.iter().all(|&i| i < l));
        }
    }
}

fn layer_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=6, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_partition_unity((seed, m, t) in layer_strategy(), k_frac in 0.0f64..1.0) {
        let mut rng = stream(seed, "partition");
        let k = 1 + ((m as f64 - 1.0) * k_frac).round() as usize;
        let layer = random_layer(5, 4, m, k, &mut rng);
        let x = Tensor::randn(&[t, 5], 3.0, &mut rng);
        let rec = route(&x, &layer).unwrap();
        for r in 0..t {
            let row: f64 = rec.probs.row(r).iter().sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
            let s: f64 = rec.weights[r].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(rec.weights[r].iter().all(|&w| w > 0.0));
            let mut sel = rec.selected[r].clone();
            sel.sort_unstable();
            sel.dedup();
            prop_assert_eq!(sel.len(), k);
        }
    }

    #[test]
    fn logit_shift_leaves_routing_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = stream(seed, "shift");
        let layer = random_layer(5, 4, 4, 2, &mut rng);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let offsets: Vec<f64> = (0..6).map(|r| shift * (r as f64 + 1.0) / 6.0).collect();
        // an extra input feature carrying the per-token offset, routed through a row of ones
        let mut xs = Vec::new();
        for r in 0..6 {
            let mut row = x.row(r).to_vec();
            row.push(offsets[r]);
            xs.push(row);
        }
        let mut ws: Vec<Vec<f64>> = (0..5).map(|r| layer.router.weight.row(r).to_vec()).collect();
        ws.push(vec![1.0; 4]);
        let shifted = MoELayer::new(
            Router { weight: Tensor::from_rows(&ws).unwrap() },
            (0..4).map(|_| ExpertFFN::zeros(6, 4)).collect(),
            2,
        ).unwrap();
        let a = route(&x, &layer).unwrap();
        let b = route(&Tensor::from_rows(&xs).unwrap(), &shifted).unwrap();
        prop_assert!(a.probs.max_abs_diff(&b.probs) <= 1e-12);
        if a.decision_margin() > 1e-9 {
            prop_assert_eq!(&a.selected, &b.selected);
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                for (p, q) in wa.iter().zip(wb) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_experts_collapse_to_dense((seed, m, t) in layer_strategy(), k_frac in 0.0f64..1.0) {
        let mut rng = stream(seed, "collapse");
        let k = 1 + ((m as f64 - 1.0) * k_frac).round() as usize;
        let dense = ExpertFFN::random(5, 7, 1.0, &mut rng);
        let layer = MoELayer::new(
            Router { weight: Tensor::randn(&[5, m], 1.0, &mut rng) },
            vec![dense.clone(); m],
            k,
        ).unwrap();
        let x = Tensor::randn(&[t, 5], 1.0, &mut rng);
        let (y, _) = moe_forward(&x, &layer).unwrap();
        prop_assert!(y.max_abs_diff(&expert_forward(&x, &dense).unwrap()) <= 1e-12);
    }
}

mod common;

use ainet_core::ofm::{reorder_layers, LayerStack, Ofm, OfmConfig, ScanDirection, ScanOrder};
use ainet_tensor::gradcheck::{check, GradCheckConfig};
use ainet_tensor::{Graph, ParamStore, Tensor, Var};
use common::{max_abs_diff, rng, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn module(cfg: OfmConfig, seed: u64) -> (ParamStore, Ofm) {
    let mut store = ParamStore::new(seed);
    let ofm = Ofm::new(&mut store, "ofm", cfg).unwrap();
    (store, ofm)
}

fn randomize_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") && !p.name.contains("dt_proj") {
            p.value = uniform(p.value.shape(), -0.3, 0.3, &mut r);
        }
    }
}

fn zero_predictor(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if p.name.contains(".order.") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

fn stack(g: &mut Graph, layers: &[Tensor]) -> LayerStack {
    let vars: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
    LayerStack::new(g, vars).unwrap()
}

fn random_layers(n: usize, bsz: usize, len: usize, c: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| uniform(&[bsz, len, c], -1.0, 1.0, &mut r)).collect()
}

#[test]
fn predicted_orders_are_permutations() {
    let (mut store, ofm) = module(OfmConfig::new(4), 1);
    randomize_biases(&mut store, 2);
    let mut r = rng(3);
    for _ in 0..1000 {
        let n = r.random_range(1..7);
        let len = r.random_range(1..4);
        let mut g = Graph::new();
        let f = g.constant(uniform(&[2, n * len, 4], -3.0, 3.0, &mut r));
        let (logits, orders) = ofm.predict_scan_order(&mut g, &store, f, n).unwrap();
        assert_eq!(g.shape(logits), &[2, n]);
        for o in &orders {
            let mut sorted = o.as_slice().to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn hand_set_predictor_orders_by_logit() {
    // Width 1 with unit weights: logit_i = silu(mean_i).
    let cfg = OfmConfig {
        expand: 1,
        state_size: 2,
        ..OfmConfig::new(1)
    };
    let (mut store, ofm) = module(cfg, 0);
    for p in store.iter_mut() {
        if p.name.contains(".order.") {
            p.value = if p.name.ends_with("weight") { Tensor::ones(&[1, 1]) } else { Tensor::zeros(&[1]) };
        }
    }
    let targets = [0.1, 0.9, 0.5];
    // invert silu on the positive branch by Newton's method
    let means: Vec<f64> = targets
        .iter()
        .map(|&y| {
            let mut m = 1.0;
            for _ in 0..50 {
                let s = common::sigmoid(m);
                m -= (m * s - y) / (s + m * s * (1.0 - s));
            }
            m
        })
        .collect();
    let len = 3;
    let mut data = Vec::new();
    for &m in &means {
        // tokens vary around the layer mean
        data.extend([m - 0.25, m, m + 0.25]);
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![1, 3 * len, 1], data).unwrap());
    let (logits, orders) = ofm.predict_scan_order(&mut g, &store, f, 3).unwrap();
    for (got, want) in g.value(logits).data().iter().zip(targets) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(orders[0].as_slice(), &[1, 2, 0]);
}

#[test]
fn zero_predictor_gives_identity_order() {
    let (mut store, ofm) = module(OfmConfig::new(4), 4);
    zero_predictor(&mut store);
    let mut g = Graph::new();
    let f = g.constant(uniform(&[3, 5 * 2, 4], -1.0, 1.0, &mut rng(5)));
    let (_, orders) = ofm.predict_scan_order(&mut g, &store, f, 5).unwrap();
    assert!(orders.iter().all(ScanOrder::is_identity));
}

#[test]
fn reorder_moves_whole_blocks() {
    let mut r = rng(6);
    let (n, len, c) = (5, 3, 2);
    let x = uniform(&[2, n * len, c], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let v = g.constant(x.clone());

    let id = vec![ScanOrder::identity(n); 2];
    let same = reorder_layers(&mut g, v, len, &id).unwrap();
    assert!(g.value(same).bitwise_eq(&x));

    let orders: Vec<ScanOrder> = (0..2)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut r);
            ScanOrder::new(p).unwrap()
        })
        .collect();
    let moved = reorder_layers(&mut g, v, len, &orders).unwrap();
    for (b, o) in orders.iter().enumerate() {
        let per_batch = &x.data()[b * n * len * c..(b + 1) * n * len * c];
        let expected = common::reorder_rows(per_batch, o.as_slice(), len, c);
        assert_eq!(&g.value(moved).data()[b * n * len * c..(b + 1) * n * len * c], expected.as_slice());
    }
    let inverse: Vec<ScanOrder> = orders.iter().map(ScanOrder::inverse).collect();
    let back = reorder_layers(&mut g, moved, len, &inverse).unwrap();
    assert!(g.value(back).bitwise_eq(&x));

    assert!(reorder_layers(&mut g, v, 4, &id).is_err());
}

#[test]
fn marker_tokens_stay_in_their_blocks() {
    let (n, len, c) = (4, 3, 4);
    let (mut store, ofm) = module(OfmConfig::new(c), 7);
    randomize_biases(&mut store, 8);
    let layers: Vec<Tensor> = (0..n).map(|i| Tensor::full(&[1, len, c], (i + 1) as f64 * 0.5)).collect();
    let mut g = Graph::new();
    let s = stack(&mut g, &layers);
    let (_, trace) = ofm.forward_traced(&mut g, &store, &s).unwrap();
    let di = ofm.cfg.inner_dim();

    // projected marker row of each layer
    let mut g2 = Graph::new();
    let f = s.concat(&mut g).unwrap();
    let f = g2.constant(g.value(f).clone());
    let xz = ofm.in_proj.forward(&mut g2, &store, f).unwrap();
    let x = g2.slice(xz, 2, 0, di).unwrap();
    let x = g2.value(x).data().to_vec();
    let marker = |layer: usize| &x[layer * len * di..layer * len * di + di];

    let reversed = ScanOrder::reversed(n);
    for (which, order) in [(0, ScanOrder::identity(n)), (1, reversed), (2, trace.orders[0].clone())] {
        let input = g.value(trace.branch_inputs[which]).data();
        for (k, &layer) in order.as_slice().iter().enumerate() {
            for t in 0..len {
                let row = &input[(k * len + t) * di..(k * len + t + 1) * di];
                assert_eq!(row, marker(layer), "branch {which}, block {k}, token {t}");
            }
        }
    }
}

#[test]
fn single_layer_branches_coincide() {
    let (mut store, ofm) = module(OfmConfig::new(4), 9);
    randomize_biases(&mut store, 10);
    let mut g = Graph::new();
    let s = stack(&mut g, &random_layers(1, 2, 6, 4, 11));
    let (_, trace) = ofm.forward_traced(&mut g, &store, &s).unwrap();
    let [f, b, o] = trace.branch_outputs.map(|v| g.value(v).clone());
    assert!(f.bitwise_eq(&b) && f.bitwise_eq(&o));
}

#[test]
fn identity_order_ordered_branch_equals_forward() {
    let (mut store, ofm) = module(OfmConfig::new(4), 12);
    randomize_biases(&mut store, 13);
    zero_predictor(&mut store);
    let mut g = Graph::new();
    let s = stack(&mut g, &random_layers(3, 2, 4, 4, 14));
    let (_, trace) = ofm.forward_traced(&mut g, &store, &s).unwrap();
    assert!(trace.orders.iter().all(ScanOrder::is_identity));
    assert!(g.value(trace.branch_outputs[0]).bitwise_eq(g.value(trace.branch_outputs[2])));
}

#[test]
fn backward_branch_is_a_relabeled_forward_scan() {
    let (mut store, ofm) = module(OfmConfig::new(4), 15);
    randomize_biases(&mut store, 16);
    let (n, len, di) = (3, 4, ofm.cfg.inner_dim());
    let mut g = Graph::new();
    let x = g.constant(uniform(&[2, n * len, di], -1.0, 1.0, &mut rng(17)));
    let rev = vec![ScanOrder::reversed(n); 2];
    let x_rev = reorder_layers(&mut g, x, len, &rev).unwrap();
    let (y_back, _) = ofm.scan_branch(&mut g, &store, x_rev, n, &ScanDirection::Backward).unwrap();
    let (y_fwd, _) = ofm.scan_branch(&mut g, &store, x, n, &ScanDirection::Forward).unwrap();
    let y_fwd_rev = reorder_layers(&mut g, y_fwd, len, &rev).unwrap();
    assert!(g.value(y_back).bitwise_eq(g.value(y_fwd_rev)));

    let bad = g.constant(Tensor::zeros(&[1, 7, di]));
    assert!(ofm.scan_branch(&mut g, &store, bad, 2, &ScanDirection::Forward).is_err());
}

#[test]
fn scan_branch_matches_loop_oracle() {
    let cfg = OfmConfig {
        expand: 1,
        ..OfmConfig::new(3)
    };
    let (mut store, ofm) = module(cfg, 18);
    randomize_biases(&mut store, 19);
    let (n, len, di) = (2, 4, 3);
    let x = uniform(&[1, n * len, di], -1.0, 1.0, &mut rng(20));
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let order = ScanOrder::new(vec![1, 0]).unwrap();
    for direction in [ScanDirection::Forward, ScanDirection::Backward, ScanDirection::Ordered(vec![order])] {
        let (y, _) = ofm.scan_branch(&mut g, &store, v, n, &direction).unwrap();
        let perm: Vec<usize> = match &direction {
            ScanDirection::Forward => vec![0, 1],
            _ => vec![1, 0],
        };
        let input = common::reorder_rows(x.data(), &perm, len, di);
        let scanned = common::ofm_branch(&store, "ofm.branch", &ofm.cfg, &input, n * len);
        let expected = common::reorder_rows(&scanned, &common::inverse(&perm), len, di);
        let diff = max_abs_diff(g.value(y).data(), &expected);
        assert!(diff < 1e-10, "{direction:?}: {diff:e}");
    }
}

#[test]
fn matches_branch_by_branch_composition() {
    for share in [true, false] {
        let cfg = OfmConfig {
            share_branch_params: share,
            ..OfmConfig::new(4)
        };
        let (mut store, ofm) = module(cfg, 21);
        randomize_biases(&mut store, 22);
        let (n, len) = (3, 4);
        let layers = random_layers(n, 1, len, 4, 23);
        let mut g = Graph::new();
        let s = stack(&mut g, &layers);
        let y = ofm.forward(&mut g, &store, &s).unwrap();
        let plain: Vec<Vec<f64>> = layers.iter().map(|t| t.data().to_vec()).collect();
        let expected = common::ofm(&store, "ofm", &ofm.cfg, &plain, len);
        let diff = max_abs_diff(g.value(y).data(), &expected);
        assert!(diff < 1e-10, "share={share}: {diff:e}");
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let (mut store, ofm) = module(OfmConfig::new(4), 24);
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut g = Graph::new();
    let s = stack(&mut g, &random_layers(3, 2, 5, 4, 25));
    let y = ofm.forward(&mut g, &store, &s).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_at_desk_width() {
    let (store, ofm) = module(OfmConfig::new(32), 26);
    let mut g = Graph::new();
    let s = stack(&mut g, &random_layers(4, 2, 320, 32, 27));
    let (y, trace) = ofm.forward_traced(&mut g, &store, &s).unwrap();
    assert_eq!(g.shape(y), &[2, 320, 32]);
    assert_eq!(trace.token_count, 1280);
    assert!(g.value(y).all_finite());
}

#[test]
fn straight_through_keeps_values_and_reaches_predictor() {
    let plain_cfg = OfmConfig::new(4);
    let st_cfg = OfmConfig {
        straight_through: true,
        ..plain_cfg.clone()
    };
    let (mut store, plain) = module(plain_cfg, 28);
    let st = Ofm::new(&mut ParamStore::new(28), "ofm", st_cfg).unwrap();
    randomize_biases(&mut store, 29);
    let layers = random_layers(3, 1, 4, 4, 30);
    let mut values = Vec::new();
    let mut reached = Vec::new();
    for m in [&plain, &st] {
        let mut g = Graph::new();
        let s = stack(&mut g, &layers);
        let y = m.forward(&mut g, &store, &s).unwrap();
        values.push(g.value(y).clone());
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let id = store.id("ofm.order.fc.weight").unwrap();
        let gw = grads.params().find(|(p, _)| *p == id).map(|(_, t)| t.clone());
        reached.push(gw.is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
    }
    assert!(values[0].bitwise_eq(&values[1]));
    assert_eq!(reached, [false, true]);
}

#[test]
fn gradients_match_finite_differences() {
    // Values only: with the straight-through flag the predictor gradient is a
    // surrogate and has no finite-difference counterpart.
    let (mut store, ofm) = module(OfmConfig::new(4), 31);
    randomize_biases(&mut store, 32);
    let mut inputs = random_layers(2, 1, 3, 4, 33);
    let report = check(
        "ofm",
        &mut store,
        &mut inputs,
        |g, s, v| {
            let st = LayerStack::new(g, v.to_vec()).unwrap();
            Ok(ofm.forward(g, s, &st).unwrap())
        },
        &GradCheckConfig {
            tolerance: 1e-3,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #[test]
    fn order_inverse_round_trip(mut p in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let o = ScanOrder::new(p.clone()).unwrap();
        let inv = o.inverse();
        for (k, &i) in o.as_slice().iter().enumerate() {
            prop_assert_eq!(inv.as_slice()[i], k);
        }
        p.push(6);
        prop_assert!(ScanOrder::new(p).is_ok());
    }
}

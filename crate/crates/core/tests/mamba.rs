mod common;

use ainet_core::mamba::{MambaBlock, MambaConfig};
use ainet_tensor::gradcheck::{check, GradCheckConfig};
use ainet_tensor::{Graph, ParamStore, Tensor};
use common::{max_abs_diff, rng, uniform};

fn block(c: usize, seed: u64) -> (ParamStore, MambaBlock) {
    let mut store = ParamStore::new(seed);
    let block = MambaBlock::new(&mut store, "m", MambaConfig::new(c)).unwrap();
    (store, block)
}

fn run(store: &ParamStore, block: &MambaBlock, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = block.forward(&mut g, store, v).unwrap();
    g.value(y).clone()
}

/// Biases are zero at initialization; give them values so the oracle covers them.
fn perturb_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") && !p.name.contains("dt_proj") {
            p.value = uniform(p.value.shape(), -0.3, 0.3, &mut r);
        }
    }
}

#[test]
fn matches_slow_oracle() {
    let (mut store, block) = block(4, 3);
    perturb_biases(&mut store, 4);
    let x = uniform(&[1, 8, 4], -1.0, 1.0, &mut rng(5));
    let y = run(&store, &block, &x);
    let oracle = common::mamba(&store, "m", &block.cfg, x.data(), 8);
    let diff = max_abs_diff(y.data(), &oracle);
    assert!(diff < 1e-10, "max abs diff {diff:e}");
}

#[test]
fn zero_projections_give_zero_output() {
    let (mut store, block) = block(4, 1);
    for p in store.iter_mut() {
        if p.name.contains("proj") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let x = uniform(&[2, 7, 4], -3.0, 3.0, &mut rng(2));
    assert!(run(&store, &block, &x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn preserves_shape_at_full_width() {
    let (store, block) = block(32, 0);
    let x = uniform(&[2, 320, 32], -1.0, 1.0, &mut rng(0));
    let y = run(&store, &block, &x);
    assert_eq!(y.shape(), &[2, 320, 32]);
    assert!(y.all_finite());
}

#[test]
fn is_causal() {
    let (mut store, block) = block(4, 8);
    perturb_biases(&mut store, 9);
    let x = uniform(&[1, 10, 4], -1.0, 1.0, &mut rng(10));
    let mut x2 = x.clone();
    x2.set(&[0, 6, 2], 3.0);
    let (y1, y2) = (run(&store, &block, &x), run(&store, &block, &x2));
    for t in 0..10 {
        let same = (0..4).all(|c| y1.get(&[0, t, c]).to_bits() == y2.get(&[0, t, c]).to_bits());
        assert_eq!(same, t < 6, "t={t}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (mut store, block) = block(4, 12);
    perturb_biases(&mut store, 13);
    let mut inputs = vec![uniform(&[1, 6, 4], -2.0, 2.0, &mut rng(14))];
    let report = check(
        "mamba",
        &mut store,
        &mut inputs,
        |g, s, v| Ok(block.forward(g, s, v[0]).unwrap()),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

use ainet_tensor::gradcheck::{check, GradCheckConfig};
use ainet_tensor::{Graph, Init, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64, low: f64, high: f64) -> Tensor {
    Tensor::uniform(shape, low, high, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_grad<F>(name: &str, mut inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new(0);
    let cfg = GradCheckConfig {
        seed: 3,
        ..Default::default()
    };
    let report = check(name, &mut store, &mut inputs, build, &cfg).unwrap();
    assert!(report.checked >= 20.min(inputs.iter().map(|t| t.numel()).sum()));
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn elementwise_gradients() {
    let x = || rand_tensor(&[4, 5], 1, -2.0, 2.0);
    let y = || rand_tensor(&[4, 5], 2, -2.0, 2.0);
    assert_grad("add", vec![x(), y()], |g, _, v| g.add(v[0], v[1]));
    assert_grad("sub", vec![x(), y()], |g, _, v| g.sub(v[0], v[1]));
    assert_grad("mul", vec![x(), y()], |g, _, v| g.mul(v[0], v[1]));
    assert_grad("div", vec![x(), rand_tensor(&[4, 5], 2, 0.5, 2.0)], |g, _, v| {
        g.div(v[0], v[1])
    });
    assert_grad("tanh", vec![x()], |g, _, v| Ok(g.tanh(v[0])));
    assert_grad("silu", vec![x()], |g, _, v| Ok(g.silu(v[0])));
    assert_grad("softplus", vec![x()], |g, _, v| Ok(g.softplus(v[0])));
    assert_grad("sigmoid", vec![x()], |g, _, v| Ok(g.sigmoid(v[0])));
    assert_grad("exp", vec![x()], |g, _, v| Ok(g.exp(v[0])));
    assert_grad("log", vec![rand_tensor(&[4, 5], 3, 0.2, 2.0)], |g, _, v| Ok(g.log(v[0])));
    assert_grad("abs", vec![rand_tensor(&[4, 5], 4, 0.1, 2.0)], |g, _, v| {
        let n = g.scale(v[0], -1.0);
        Ok(g.abs(n))
    });
    assert_grad("scale", vec![x()], |g, _, v| Ok(g.affine(v[0], -1.5, 0.25)));
}

#[test]
fn mul_gradient_at_tight_step() {
    let mut store = ParamStore::new(0);
    let mut inputs = vec![rand_tensor(&[3, 7], 10, -2.0, 2.0), rand_tensor(&[3, 7], 11, -2.0, 2.0)];
    let cfg = GradCheckConfig {
        step: 1e-6,
        tolerance: 1e-6,
        ..Default::default()
    };
    let r = check("mul", &mut store, &mut inputs, |g, _, v| g.mul(v[0], v[1]), &cfg).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn broadcast_gradients() {
    assert_grad(
        "bias-add",
        vec![rand_tensor(&[2, 3, 4], 5, -2.0, 2.0), rand_tensor(&[4], 6, -2.0, 2.0)],
        |g, _, v| g.add(v[0], v[1]),
    );
    assert_grad(
        "column-mul",
        vec![rand_tensor(&[2, 3, 4], 7, -2.0, 2.0), rand_tensor(&[3, 1], 8, -2.0, 2.0)],
        |g, _, v| g.mul(v[0], v[1]),
    );
}

#[test]
fn matmul_gradients() {
    assert_grad(
        "matmul",
        vec![rand_tensor(&[4, 5], 9, -2.0, 2.0), rand_tensor(&[5, 3], 10, -2.0, 2.0)],
        |g, _, v| g.matmul(v[0], v[1]),
    );
    assert_grad(
        "batched-matmul",
        vec![rand_tensor(&[2, 3, 4, 5], 11, -2.0, 2.0), rand_tensor(&[3, 5, 2], 12, -2.0, 2.0)],
        |g, _, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn layer_norm_gradients() {
    assert_grad(
        "layer_norm",
        vec![
            rand_tensor(&[3, 6], 13, -2.0, 2.0),
            rand_tensor(&[6], 14, -2.0, 2.0),
            rand_tensor(&[6], 15, -2.0, 2.0),
        ],
        |g, _, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn structural_gradients() {
    let a = || rand_tensor(&[2, 3, 4], 16, -2.0, 2.0);
    let b = || rand_tensor(&[2, 5, 4], 17, -2.0, 2.0);
    assert_grad("concat", vec![a(), b()], |g, _, v| g.concat(&[v[0], v[1]], 1));
    assert_grad("slice", vec![b()], |g, _, v| g.slice(v[0], 1, 1, 3));
    assert_grad("permute", vec![a()], |g, _, v| g.permute(v[0], &[2, 0, 1]));
    assert_grad("reshape", vec![a()], |g, _, v| g.reshape(v[0], &[6, 4]));
    assert_grad("sum_axis", vec![a()], |g, _, v| g.sum_axis(v[0], 1));
    assert_grad("mean", vec![a()], |g, _, v| Ok(g.mean(v[0])));
    assert_grad("softmax", vec![a()], |g, _, v| Ok(g.softmax(v[0])));
    assert_grad("log_softmax", vec![a()], |g, _, v| Ok(g.log_softmax(v[0])));
    assert_grad("permute_blocks", vec![rand_tensor(&[2, 6, 3], 18, -2.0, 2.0)], |g, _, v| {
        g.permute_blocks(v[0], 2, &[vec![2, 0, 1], vec![1, 2, 0]])
    });
    assert_grad("gather_rows", vec![rand_tensor(&[2, 6, 3], 19, -2.0, 2.0)], |g, _, v| {
        g.gather_rows(v[0], &[4, 0])
    });
}

#[test]
fn parameter_gradients_flow_through_store() {
    let mut store = ParamStore::new(21);
    store.register("w", &[4, 3], Init::Normal { std: 1.0 }).unwrap();
    store.register("b", &[3], Init::Normal { std: 1.0 }).unwrap();
    let mut inputs = vec![rand_tensor(&[5, 4], 22, -2.0, 2.0)];
    let r = check(
        "linear",
        &mut store,
        &mut inputs,
        |g, s, v| {
            let w = g.param(s, s.id("w")?);
            let b = g.param(s, s.id("b")?);
            let y = g.matmul(v[0], w)?;
            let y = g.add(y, b)?;
            Ok(g.tanh(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

/// Scalar triple loop.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_tensor(&[4, 5], 30, -1.0, 1.0);
    let b = rand_tensor(&[5, 3], 31, -1.0, 1.0);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    assert!(g.value(y).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn layer_norm_normalizes_rows() {
    let x = rand_tensor(&[6, 16], 40, -3.0, 5.0);
    let mut g = Graph::new();
    let vx = g.constant(x);
    let gamma = g.constant(Tensor::ones(&[16]));
    let beta = g.constant(Tensor::zeros(&[16]));
    let eps = 1e-5;
    let y = g.layer_norm(vx, gamma, beta, eps).unwrap();
    for (r, row) in g.value(y).data().chunks(16).enumerate() {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        // Population variance of the normalized row is var/(var+eps) of the input.
        let xin = &g.value(vx).data()[r * 16..(r + 1) * 16];
        let m0 = xin.iter().sum::<f64>() / 16.0;
        let v0 = xin.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - v0 / (v0 + eps)).abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let run = || {
        let x = rand_tensor(&[3, 8], 50, -2.0, 2.0);
        let w = rand_tensor(&[8, 8], 51, -1.0, 1.0);
        let mut g = Graph::new();
        let (vx, vw) = (g.input(x), g.input(w));
        let h = g.matmul(vx, vw).unwrap();
        let h = g.silu(h);
        let s = g.softmax(h);
        let l = g.sum(s);
        let l2 = g.mul(l, l).unwrap();
        let grads = g.backward(l2).unwrap();
        (g.value(h).clone(), grads.wrt(vw).unwrap().clone())
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert!(a1.bitwise_eq(&a2) && g1.bitwise_eq(&g2));
}

fn naive_broadcast_add(a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    for flat in 0..n {
        let mut idx = vec![0; rank];
        let mut rem = flat;
        for d in (0..rank).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let pick = |t: &Tensor| {
            let off = rank - t.rank();
            let ti: Vec<usize> = (0..t.rank())
                .map(|d| if t.shape()[d] == 1 { 0 } else { idx[d + off] })
                .collect();
            t.get(&ti)
        };
        out.set(&idx, pick(a) + pick(b));
    }
    out
}

fn broadcast_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    (1usize..=4)
        .prop_flat_map(|rank| {
            (
                prop::collection::vec(1usize..=3, rank),
                prop::collection::vec(any::<bool>(), rank),
                prop::collection::vec(any::<bool>(), rank),
                0..=rank,
                0..=rank,
            )
        })
        .prop_map(|(out, ones_a, ones_b, drop_a, drop_b)| {
            let make = |ones: &[bool], drop: usize| -> Vec<usize> {
                out.iter()
                    .zip(ones)
                    .skip(drop.min(out.len() - 1))
                    .map(|(&d, &one)| if one { 1 } else { d })
                    .collect()
            };
            (make(&ones_a, drop_a), make(&ones_b, drop_b), out.clone())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn broadcast_add_matches_scalar_loops((sa, sb, _) in broadcast_pair(), seed in 0u64..1000) {
        let a = rand_tensor(&sa, seed, -1.0, 1.0);
        let b = rand_tensor(&sb, seed + 1, -1.0, 1.0);
        let out_shape = ainet_tensor::tensor::broadcast_shapes(&sa, &sb).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.add(va, vb).unwrap();
        prop_assert!(g.value(y).bitwise_eq(&naive_broadcast_add(&a, &b, &out_shape)));
    }

    #[test]
    fn split_inverts_concat(sizes in prop::collection::vec(1usize..5, 1..4), rows in 1usize..4, seed in 0u64..1000) {
        let mut g = Graph::new();
        let parts: Vec<Tensor> = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| rand_tensor(&[rows, s, 3], seed + i as u64, -5.0, 5.0))
            .collect();
        let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let cat = g.concat(&vars, 1).unwrap();
        let back = g.split(cat, &sizes, 1).unwrap();
        for (v, t) in back.iter().zip(&parts) {
            prop_assert!(g.value(*v).bitwise_eq(t));
        }
    }
}

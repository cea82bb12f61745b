//! Self-checks used by the command-line tool: finite-difference gradient
//! checks of every module and comparisons against reference computations
//! written without the graph.

use ainet_tensor::gradcheck::{check, GradCheckConfig, GradCheckReport};
use ainet_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dfm::{Dfm, DfmConfig};
use crate::error::{CoreError, Result};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::nn::CausalConv1d;
use crate::ofm::{reorder_layers, LayerStack, Ofm, OfmConfig, ScanOrder};
use crate::ssm::{conv_kernel, conv_scan, discretize_zoh, recurrent_scan, selective_scan, SsmParameters};
use crate::tracker::{generate_dataset, Ainet, Batch, DataConfig, FusionMode, PipelineConfig};

/// A measured discrepancy and the largest accepted value.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.metric <= self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], low: f64, high: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, low, high, r)
}

/// Moves biases away from their zero init so every path carries signal.
fn randomize_biases(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") && !p.name.contains("dt_proj") {
            p.value = uniform(p.value.shape(), -0.3, 0.3, r);
        }
    }
}

/// Adapts a module forward pass to the checker's error type.
fn graph_fn<F>(f: F) -> impl Fn(&mut Graph, &ParamStore, &[Var]) -> ainet_tensor::Result<Var>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    move |g, s, v| {
        f(g, s, v).map_err(|e| match e {
            CoreError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        })
    }
}

/// Gradient checks of the scan, the Mamba block, both fusion modules, the
/// two composed, and the whole tracker at toy size. Kernels with hand-written
/// backward passes use tolerance `1e-4`; composites use `1e-3`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let tight = GradCheckConfig { seed, ..Default::default() };
    let loose = GradCheckConfig { tolerance: 1e-3, ..tight.clone() };
    let mut r = rng(seed);
    let mut reports = Vec::new();

    {
        let mut store = ParamStore::new(seed);
        let conv = CausalConv1d::new(&mut store, "conv", 3, 4)?;
        randomize_biases(&mut store, &mut r);
        let mut inputs = vec![uniform(&[2, 6, 3], -2.0, 2.0, &mut r)];
        reports.push(check("causal_conv1d", &mut store, &mut inputs, graph_fn(|g, s, v| conv.forward(g, s, v[0])), &tight)?);
    }
    {
        let (b, l, d, n) = (2, 5, 3, 4);
        let mut inputs = vec![
            uniform(&[b, l, d], -2.0, 2.0, &mut r),
            uniform(&[b, l, d], 0.05, 1.0, &mut r),
            uniform(&[d, n], -1.0, 1.0, &mut r),
            uniform(&[b, l, n], -1.0, 1.0, &mut r),
            uniform(&[b, l, n], -1.0, 1.0, &mut r),
            uniform(&[d], -1.0, 1.0, &mut r),
        ];
        reports.push(check(
            "selective_scan",
            &mut ParamStore::new(seed),
            &mut inputs,
            graph_fn(|g, _, v| selective_scan(g, v[0], v[1], v[2], v[3], v[4], Some(v[5]))),
            &tight,
        )?);
    }
    {
        let mut store = ParamStore::new(seed);
        let block = MambaBlock::new(&mut store, "mamba", MambaConfig::new(4))?;
        randomize_biases(&mut store, &mut r);
        let mut inputs = vec![uniform(&[1, 6, 4], -2.0, 2.0, &mut r)];
        reports.push(check("mamba_block", &mut store, &mut inputs, graph_fn(|g, s, v| block.forward(g, s, v[0])), &tight)?);
    }
    {
        let mut store = ParamStore::new(seed);
        let dfm = Dfm::new(&mut store, "dfm", 0, DfmConfig::new(4))?;
        randomize_biases(&mut store, &mut r);
        let mut inputs = vec![uniform(&[1, 4, 4], -2.0, 2.0, &mut r), uniform(&[1, 4, 4], -2.0, 2.0, &mut r)];
        reports.push(check(
            "dfm",
            &mut store,
            &mut inputs,
            graph_fn(|g, s, v| {
                let out = dfm.forward(g, s, v[0], v[1])?;
                let both = g.add(out.rgb, out.tir)?;
                Ok(g.add(both, out.fused)?)
            }),
            &loose,
        )?);
    }
    {
        let mut store = ParamStore::new(seed);
        let ofm = Ofm::new(&mut store, "ofm", OfmConfig::new(4))?;
        randomize_biases(&mut store, &mut r);
        let mut inputs: Vec<Tensor> = (0..2).map(|_| uniform(&[1, 3, 4], -1.0, 1.0, &mut r)).collect();
        reports.push(check(
            "ofm",
            &mut store,
            &mut inputs,
            graph_fn(|g, s, v| {
                let stack = LayerStack::new(g, v.to_vec())?;
                ofm.forward(g, s, &stack)
            }),
            &loose,
        )?);
    }
    {
        // Two fusion layers whose fused outputs feed the ordered fusion.
        let mut store = ParamStore::new(seed);
        let dfms = [
            Dfm::new(&mut store, "dfm", 0, DfmConfig::new(4))?,
            Dfm::new(&mut store, "dfm", 1, DfmConfig::new(4))?,
        ];
        let ofm = Ofm::new(&mut store, "ofm", OfmConfig::new(4))?;
        randomize_biases(&mut store, &mut r);
        let mut inputs = vec![uniform(&[1, 3, 4], -2.0, 2.0, &mut r), uniform(&[1, 3, 4], -2.0, 2.0, &mut r)];
        reports.push(check(
            "dfm_then_ofm",
            &mut store,
            &mut inputs,
            graph_fn(|g, s, v| {
                let (mut rgb, mut tir) = (v[0], v[1]);
                let mut fused = Vec::new();
                for dfm in &dfms {
                    let out = dfm.forward(g, s, rgb, tir)?;
                    fused.push(out.fused);
                    rgb = g.tanh(out.rgb);
                    tir = g.tanh(out.tir);
                }
                let stack = LayerStack::new(g, fused)?;
                ofm.forward(g, s, &stack)
            }),
            &loose,
        )?);
    }
    {
        let cfg = PipelineConfig {
            num_layers: 2,
            channels: 8,
            search_size: 16,
            template_size: 8,
            patch: 4,
            heads: 2,
            fusion_mode: FusionMode::DfmOfm,
            seed,
            ..PipelineConfig::default()
        };
        let mut store = ParamStore::new(seed);
        let model = Ainet::new(&mut store, &cfg)?;
        randomize_biases(&mut store, &mut r);
        let data = generate_dataset(seed, 1, &DataConfig::new(cfg.search_size, cfg.template_size))?;
        let batch = Batch::new(&[&data[0]], cfg.patch)?;
        let search = cfg.search_tokens();
        reports.push(check(
            "pipeline",
            &mut store,
            &mut [],
            graph_fn(|g, s, _| {
                let (out, _) = model.forward(g, s, &batch)?;
                let heat = g.reshape(out.heatmap, &[1, search, 1])?;
                Ok(g.concat(&[heat, out.boxes], 2)?)
            }),
            &GradCheckConfig { samples_per_leaf: 8, ..loose.clone() },
        )?);
    }
    Ok(reports)
}

/// `exp(M)` of a 2x2 matrix by Taylor series on `M / 2^s` and `s` squarings.
fn expm2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        c
    };
    let norm = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut s = 0;
    let mut scale = 1.0;
    while norm * scale > 0.125 {
        scale /= 2.0;
        s += 1;
    }
    let x = m.map(|row| row.map(|v| v * scale));
    let mut sum = [[1.0, 0.0], [0.0, 1.0]];
    let mut term = sum;
    for k in 1..30 {
        term = mul(term, x).map(|row| row.map(|v| v / k as f64));
        for i in 0..2 {
            for j in 0..2 {
                sum[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        sum = mul(sum, sum);
    }
    sum
}

/// Naive selective scan for one batch element; `u, delta: [L, D]`,
/// `a_log: [D, N]`, `b, c: [L, N]`.
#[allow(clippy::too_many_arguments)]
fn scan_loop(u: &[f64], delta: &[f64], a_log: &[f64], b: &[f64], c: &[f64], skip: &[f64], len: usize, d: usize, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            let dt = delta[t * d + ch];
            let mut acc = skip[ch] * u[t * d + ch];
            for s in 0..n {
                let a = -a_log[ch * n + s].exp();
                let e = expm2([[dt * a, dt * b[t * n + s]], [0.0, 0.0]]);
                h[ch * n + s] = e[0][0] * h[ch * n + s] + e[0][1] * u[t * d + ch];
                acc += c[t * n + s] * h[ch * n + s];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

fn rows(t: &Tensor, i: usize, width: usize) -> &[f64] {
    &t.data()[i * width..(i + 1) * width]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Recurrent versus convolutional evaluation of 50 random time-invariant
/// models at `L = 64, D = 4, N = 16`.
pub fn ssm_forms(seed: u64) -> Result<OracleReport> {
    let (len, d, n) = (64, 4, 16);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let mut r = rng(seed.wrapping_add(k));
        let params = SsmParameters {
            a_log: uniform(&[d, n], -2.0, 1.5, &mut r),
            b: uniform(&[n], -1.0, 1.0, &mut r),
            c: uniform(&[n], -1.0, 1.0, &mut r),
            d_skip: (k % 2 == 0).then(|| uniform(&[d], -1.0, 1.0, &mut r)),
        };
        let delta = uniform(&[d], 0.001, 0.5, &mut r);
        let x = uniform(&[2, len, d], -1.0, 1.0, &mut r);
        let disc = discretize_zoh(&params, &delta)?;
        let y_rec = recurrent_scan(&disc, &params.c, params.d_skip.as_ref(), &x)?;
        let kernel = conv_kernel(&disc, &params.c, len)?;
        let y_conv = conv_scan(&kernel, params.d_skip.as_ref(), &x)?;
        worst = worst.max(y_rec.max_abs_diff(&y_conv));
    }
    Ok(OracleReport {
        name: "ssm_forms".into(),
        metric: worst,
        tolerance: 1e-8,
        detail: "50 models, L=64 D=4 N=16, max |recurrent - convolution|".into(),
    })
}

/// Discretized `Ā, B̄` against the exponential of the augmented matrix
/// `[[Δa, Δb], [0, 0]]`, whose first row is `[Ā, B̄]`.
pub fn zoh(seed: u64) -> Result<OracleReport> {
    let mut r = rng(seed);
    let mut cases: Vec<(f64, f64, f64)> = (0..100)
        .map(|_| (r.random_range(-2.0..3.0f64), r.random_range(0.001..2.0), r.random_range(-2.0..2.0)))
        .collect();
    // a = -1e-12: the small-step limit
    cases.push((1e-12f64.ln(), 0.5, 1.0));
    let mut worst = 0.0f64;
    for (a_log, delta, b) in cases {
        let params = SsmParameters {
            a_log: Tensor::new(vec![1, 1], vec![a_log])?,
            b: Tensor::new(vec![1], vec![b])?,
            c: Tensor::new(vec![1], vec![1.0])?,
            d_skip: None,
        };
        let disc = discretize_zoh(&params, &Tensor::new(vec![1], vec![delta])?)?;
        let a = -a_log.exp();
        let e = expm2([[delta * a, delta * b], [0.0, 0.0]]);
        worst = worst.max((disc.a_bar.item() - e[0][0]).abs()).max((disc.b_bar.item() - e[0][1]).abs());
    }
    Ok(OracleReport {
        name: "zoh".into(),
        metric: worst,
        tolerance: 1e-12,
        detail: "101 entries, max |(Ā, B̄) - exp([[Δa, Δb], [0, 0]])|".into(),
    })
}

/// The scan op against a scalar loop at `B = 2, L = 32, D = 8, N = 16`.
pub fn selective_scan_loop(seed: u64) -> Result<OracleReport> {
    let (bsz, len, d, n) = (2, 32, 8, 16);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let mut r = rng(seed.wrapping_add(k));
        let u = uniform(&[bsz, len, d], -2.0, 2.0, &mut r);
        let delta = uniform(&[bsz, len, d], 0.001, 1.0, &mut r);
        let a_log = uniform(&[d, n], -2.0, 2.0, &mut r);
        let b = uniform(&[bsz, len, n], -1.0, 1.0, &mut r);
        let c = uniform(&[bsz, len, n], -1.0, 1.0, &mut r);
        let skip = uniform(&[d], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let v = [&u, &delta, &a_log, &b, &c, &skip].map(|t| g.constant(t.clone()));
        let y = selective_scan(&mut g, v[0], v[1], v[2], v[3], v[4], Some(v[5]))?;
        for bi in 0..bsz {
            let sl = |t: &Tensor, w: usize| rows(t, bi, len * w).to_vec();
            let want = scan_loop(&sl(&u, d), &sl(&delta, d), a_log.data(), &sl(&b, n), &sl(&c, n), skip.data(), len, d, n);
            worst = worst.max(max_abs_diff(rows(g.value(y), bi, len * d), &want));
        }
    }
    Ok(OracleReport {
        name: "selective_scan".into(),
        metric: worst,
        tolerance: 1e-10,
        detail: "20 draws, B=2 L=32 D=8 N=16, max |op - loop|".into(),
    })
}

/// Structural properties of the ordered fusion, counted as violations:
/// predicted orders are permutations, reordering inverts exactly, a single
/// layer makes all branches coincide, and the identity order makes the
/// ordered branch equal the forward one.
pub fn ofm_structure(seed: u64) -> Result<OracleReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let ofm = Ofm::new(&mut store, "ofm", OfmConfig::new(4))?;
    randomize_biases(&mut store, &mut r);
    let mut violations = 0usize;

    for _ in 0..1000 {
        let n = r.random_range(1..7);
        let len = r.random_range(1..4);
        let mut g = Graph::new();
        let f = g.constant(uniform(&[2, n * len, 4], -3.0, 3.0, &mut r));
        let (_, orders) = ofm.predict_scan_order(&mut g, &store, f, n)?;
        for o in &orders {
            let mut sorted = o.as_slice().to_vec();
            sorted.sort_unstable();
            violations += usize::from(sorted != (0..n).collect::<Vec<_>>());
        }
        let x = g.constant(uniform(&[2, n * len, 3], -1.0, 1.0, &mut r));
        let moved = reorder_layers(&mut g, x, len, &orders)?;
        let inverse: Vec<ScanOrder> = orders.iter().map(ScanOrder::inverse).collect();
        let back = reorder_layers(&mut g, moved, len, &inverse)?;
        violations += usize::from(!g.value(back).bitwise_eq(g.value(x)));
    }

    let layers = |g: &mut Graph, n: usize, r: &mut ChaCha8Rng| -> Result<LayerStack> {
        let vars: Vec<Var> = (0..n).map(|_| g.constant(uniform(&[2, 5, 4], -1.0, 1.0, r))).collect();
        LayerStack::new(g, vars)
    };
    let mut g = Graph::new();
    let single = layers(&mut g, 1, &mut r)?;
    let (_, trace) = ofm.forward_traced(&mut g, &store, &single)?;
    let [f, b, o] = trace.branch_outputs.map(|v| g.value(v));
    violations += usize::from(!(f.bitwise_eq(b) && f.bitwise_eq(o)));

    for p in store.iter_mut() {
        if p.name.contains(".order.") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let mut g = Graph::new();
    let three = layers(&mut g, 3, &mut r)?;
    let (_, trace) = ofm.forward_traced(&mut g, &store, &three)?;
    violations += usize::from(!trace.orders.iter().all(ScanOrder::is_identity));
    violations += usize::from(!g.value(trace.branch_outputs[0]).bitwise_eq(g.value(trace.branch_outputs[2])));

    Ok(OracleReport {
        name: "ofm_structure".into(),
        metric: violations as f64,
        tolerance: 0.0,
        detail: "1000 random orders and reorder round trips plus branch identities; violations".into(),
    })
}

/// Every reference comparison, in a fixed order.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![ssm_forms(seed)?, zoh(seed)?, selective_scan_loop(seed)?, ofm_structure(seed)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmented_exponential_matches_closed_form() {
        for (x, b) in [(-3.0, 0.7), (-1e-3, 1.0), (0.5, -2.0)] {
            let e = expm2([[x, b], [0.0, 0.0]]);
            assert!((e[0][0] - f64::exp(x)).abs() < 1e-14);
            assert!((e[0][1] - f64::exp_m1(x) / x * b).abs() < 1e-14);
            assert_eq!(e[1], [0.0, 1.0]);
        }
    }

    #[test]
    fn suites_pass() {
        for r in gradient_suite(0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
        for r in oracle_suite(0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}

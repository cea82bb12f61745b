//! Central finite-difference checks of analytic gradients.
//!
//! A non-scalar output is reduced to a scalar with a fixed random projection
//! `sum(out * R)`, so every output element contributes with a distinct weight.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Coordinates sampled per leaf (every coordinate when the leaf is smaller).
    pub samples_per_leaf: usize,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_leaf: 20,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leaf {
    Input(usize),
    Param(ParamId),
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub leaf: Leaf,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks gradients of `build` with respect to `inputs` and every parameter
/// in `store`.
pub fn check<F>(
    name: &str,
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, store, &vars)?;
    let projection = (g.value(out).numel() > 1)
        .then(|| Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng));
    let loss = reduce(&mut g, out, projection.as_ref())?;
    let grads = g.backward(loss)?;

    let mut leaves: Vec<(Leaf, Vec<f64>)> = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        leaves.push((Leaf::Input(k), analytic));
    }
    let param_ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in param_ids {
        let analytic = grads
            .params()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        leaves.push((Leaf::Param(id), analytic));
    }

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        let loss = reduce(&mut g, out, projection.as_ref())?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        tolerance: cfg.tolerance,
        max_rel_err: 0.0,
        worst: None,
    };
    for (leaf, analytic) in &leaves {
        let n = analytic.len();
        let picks: Vec<usize> = if n <= cfg.samples_per_leaf {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, cfg.samples_per_leaf).into_vec();
            p.sort_unstable();
            p
        };
        for idx in picks {
            let numeric = {
                let original = read_leaf(store, inputs, *leaf, idx);
                write_leaf(store, inputs, *leaf, idx, original + cfg.step);
                let plus = eval(store, inputs)?;
                write_leaf(store, inputs, *leaf, idx, original - cfg.step);
                let minus = eval(store, inputs)?;
                write_leaf(store, inputs, *leaf, idx, original);
                (plus - minus) / (2.0 * cfg.step)
            };
            let rel = relative_error(analytic[idx], numeric, cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some(Mismatch {
                    leaf: *leaf,
                    index: idx,
                    analytic: analytic[idx],
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

type OpBuild = Box<dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>>;

/// One gradient check per differentiable graph op, on random inputs drawn
/// from `seed`. Uses the default step and tolerance.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
    let cases: Vec<(&str, Vec<Tensor>, OpBuild)> = vec![
        ("add", vec![u(&[4, 5], -2.0, 2.0), u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| g.add(v[0], v[1]))),
        ("sub", vec![u(&[4, 5], -2.0, 2.0), u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| g.sub(v[0], v[1]))),
        ("mul", vec![u(&[4, 5], -2.0, 2.0), u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| g.mul(v[0], v[1]))),
        ("div", vec![u(&[4, 5], -2.0, 2.0), u(&[4, 5], 0.5, 2.0)], Box::new(|g, _, v| g.div(v[0], v[1]))),
        ("bias_add", vec![u(&[2, 3, 4], -2.0, 2.0), u(&[4], -2.0, 2.0)], Box::new(|g, _, v| g.add(v[0], v[1]))),
        ("column_mul", vec![u(&[2, 3, 4], -2.0, 2.0), u(&[3, 1], -2.0, 2.0)], Box::new(|g, _, v| g.mul(v[0], v[1]))),
        ("tanh", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.tanh(v[0])))),
        ("sigmoid", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.sigmoid(v[0])))),
        ("silu", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.silu(v[0])))),
        ("softplus", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.softplus(v[0])))),
        ("exp", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.exp(v[0])))),
        ("log", vec![u(&[4, 5], 0.2, 2.0)], Box::new(|g, _, v| Ok(g.log(v[0])))),
        ("abs", vec![u(&[4, 5], 0.1, 2.0)], Box::new(|g, _, v| {
            let n = g.scale(v[0], -1.0);
            Ok(g.abs(n))
        })),
        ("affine", vec![u(&[4, 5], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.affine(v[0], -1.5, 0.25)))),
        ("matmul", vec![u(&[4, 5], -2.0, 2.0), u(&[5, 3], -2.0, 2.0)], Box::new(|g, _, v| g.matmul(v[0], v[1]))),
        ("batched_matmul", vec![u(&[2, 3, 4, 5], -2.0, 2.0), u(&[3, 5, 2], -2.0, 2.0)], Box::new(|g, _, v| g.matmul(v[0], v[1]))),
        ("layer_norm", vec![u(&[3, 6], -2.0, 2.0), u(&[6], -2.0, 2.0), u(&[6], -2.0, 2.0)], Box::new(|g, _, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("concat", vec![u(&[2, 3, 4], -2.0, 2.0), u(&[2, 5, 4], -2.0, 2.0)], Box::new(|g, _, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![u(&[2, 5, 4], -2.0, 2.0)], Box::new(|g, _, v| g.slice(v[0], 1, 1, 3))),
        ("permute", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| g.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| g.reshape(v[0], &[6, 4]))),
        ("sum_axis", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| g.sum_axis(v[0], 1))),
        ("mean", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.mean(v[0])))),
        ("softmax", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.softmax(v[0])))),
        ("log_softmax", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|g, _, v| Ok(g.log_softmax(v[0])))),
        ("permute_blocks", vec![u(&[2, 6, 3], -2.0, 2.0)], Box::new(|g, _, v| g.permute_blocks(v[0], 2, &[vec![2, 0, 1], vec![1, 2, 0]]))),
        ("gather_rows", vec![u(&[2, 6, 3], -2.0, 2.0)], Box::new(|g, _, v| g.gather_rows(v[0], &[4, 0]))),
    ];
    let cfg = GradCheckConfig { seed, ..Default::default() };
    let mut reports = Vec::with_capacity(cases.len());
    for (name, mut inputs, build) in cases {
        let mut store = ParamStore::new(seed);
        reports.push(check(name, &mut store, &mut inputs, build, &cfg)?);
    }
    Ok(reports)
}

fn reduce(g: &mut Graph, out: Var, projection: Option<&Tensor>) -> Result<Var> {
    match projection {
        None => Ok(out),
        Some(p) => {
            let r = g.constant(p.clone());
            let prod = g.mul(out, r)?;
            Ok(g.sum(prod))
        }
    }
}

fn read_leaf(store: &ParamStore, inputs: &[Tensor], leaf: Leaf, idx: usize) -> f64 {
    match leaf {
        Leaf::Input(k) => inputs[k].data()[idx],
        Leaf::Param(id) => store.value(id).data()[idx],
    }
}

fn write_leaf(store: &mut ParamStore, inputs: &mut [Tensor], leaf: Leaf, idx: usize, v: f64) {
    match leaf {
        Leaf::Input(k) => inputs[k].data_mut()[idx] = v,
        Leaf::Param(id) => store.get_mut(id).value.data_mut()[idx] = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // detach() hides the dependency from the tape, so the analytic
        // gradient is zero while the function still depends on the input.
        let mut store = ParamStore::new(0);
        let mut inputs = vec![Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()];
        let report = check(
            "hidden",
            &mut store,
            &mut inputs,
            |g, _, v| {
                let d = g.detach(v[0]);
                g.mul(d, d)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn op_suite_passes() {
        for r in op_suite(11).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn mul_gradient_matches_at_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(0);
        let mut inputs = vec![
            Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng),
            Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng),
        ];
        let cfg = GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-6,
            ..Default::default()
        };
        let report = check("mul", &mut store, &mut inputs, |g, _, v| g.mul(v[0], v[1]), &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#![allow(dead_code)]

use ainet_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, low, high, rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Plain row-major `[rows, k] x [k, cols]`.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, k: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

/// Naive selective scan over `[L, D]` for one batch element.
/// `delta: [L, D]`, `a_log: [D, N]`, `b, c: [L, N]`.
pub fn selective_scan_loop(
    u: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: Option<&[f64]>,
    len: usize,
    d: usize,
    n: usize,
) -> Vec<f64> {
    let mut h = vec![vec![0.0; n]; d];
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            let dt = delta[t * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let a = -a_log[ch * n + s].exp();
                let a_bar = (dt * a).exp();
                let b_bar = if (dt * a).abs() < 1e-8 { dt } else { (dt * a).exp_m1() / a } * b[t * n + s];
                h[ch][s] = a_bar * h[ch][s] + b_bar * u[t * d + ch];
                acc += c[t * n + s] * h[ch][s];
            }
            if let Some(skip) = d_skip {
                acc += skip[ch] * u[t * d + ch];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

pub fn param<'a>(store: &'a ainet_tensor::ParamStore, name: &str) -> &'a [f64] {
    store.value(store.id(name).unwrap()).data()
}

/// `x W + b` row by row; `x: [rows, in]`.
pub fn linear(store: &ainet_tensor::ParamStore, name: &str, x: &[f64], rows: usize, in_dim: usize, out_dim: usize, bias: bool) -> Vec<f64> {
    let mut y = matmul(x, param(store, &format!("{name}.weight")), rows, in_dim, out_dim);
    if bias {
        let b = param(store, &format!("{name}.bias"));
        for r in 0..rows {
            for j in 0..out_dim {
                y[r * out_dim + j] += b[j];
            }
        }
    }
    y
}

/// Depthwise causal convolution of `[len, d]` with weight `[d, k]`.
pub fn causal_conv(store: &ainet_tensor::ParamStore, name: &str, x: &[f64], len: usize, d: usize) -> Vec<f64> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let k = w.len() / d;
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            let mut acc = b[ch];
            for j in 0..k {
                // tap j looks back k-1-j steps
                let back = k - 1 - j;
                if t >= back {
                    acc += w[ch * k + j] * x[(t - back) * d + ch];
                }
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

/// Selective SSM over `[len, d]` with its own projections.
pub fn selective_ssm(store: &ainet_tensor::ParamStore, name: &str, u: &[f64], len: usize, d: usize, n: usize, r: usize, skip: bool) -> Vec<f64> {
    let proj = linear(store, &format!("{name}.x_proj"), u, len, d, r + 2 * n, false);
    let mut dt_in = vec![0.0; len * r];
    let mut b = vec![0.0; len * n];
    let mut c = vec![0.0; len * n];
    for t in 0..len {
        let row = &proj[t * (r + 2 * n)..(t + 1) * (r + 2 * n)];
        dt_in[t * r..(t + 1) * r].copy_from_slice(&row[..r]);
        b[t * n..(t + 1) * n].copy_from_slice(&row[r..r + n]);
        c[t * n..(t + 1) * n].copy_from_slice(&row[r + n..]);
    }
    let delta: Vec<f64> = linear(store, &format!("{name}.dt_proj"), &dt_in, len, r, d, true)
        .into_iter()
        .map(softplus)
        .collect();
    let a_log = param(store, &format!("{name}.a_log"));
    let d_skip = skip.then(|| param(store, &format!("{name}.d_skip")));
    selective_scan_loop(u, &delta, a_log, &b, &c, d_skip, len, d, n)
}

/// Whole Mamba block on one sequence `[len, c]`.
pub fn mamba(store: &ainet_tensor::ParamStore, name: &str, cfg: &ainet_core::mamba::MambaConfig, x: &[f64], len: usize) -> Vec<f64> {
    let (c, di, n, r) = (cfg.model_dim, cfg.inner_dim(), cfg.state_size, cfg.dt_rank());
    let xz = linear(store, &format!("{name}.in_proj"), x, len, c, 2 * di, true);
    let mut xs = vec![0.0; len * di];
    let mut z = vec![0.0; len * di];
    for t in 0..len {
        xs[t * di..(t + 1) * di].copy_from_slice(&xz[t * 2 * di..t * 2 * di + di]);
        z[t * di..(t + 1) * di].copy_from_slice(&xz[t * 2 * di + di..(t + 1) * 2 * di]);
    }
    let xs: Vec<f64> = causal_conv(store, &format!("{name}.conv1d"), &xs, len, di).into_iter().map(silu).collect();
    let y = selective_ssm(store, &format!("{name}.ssm"), &xs, len, di, n, r, cfg.use_skip);
    let gated: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a * silu(*b)).collect();
    linear(store, &format!("{name}.out_proj"), &gated, len, di, c, true)
}

/// Rows of layer blocks rearranged so block `k` is input block `order[k]`.
pub fn reorder_rows(x: &[f64], order: &[usize], len: usize, width: usize) -> Vec<f64> {
    let chunk = len * width;
    order.iter().flat_map(|&i| x[i * chunk..(i + 1) * chunk].iter().copied()).collect()
}

pub fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// One branch (`conv -> SiLU -> selective SSM`) over `[tokens, di]`.
pub fn ofm_branch(store: &ainet_tensor::ParamStore, name: &str, cfg: &ainet_core::ofm::OfmConfig, x: &[f64], tokens: usize) -> Vec<f64> {
    let di = cfg.inner_dim();
    let h: Vec<f64> = causal_conv(store, &format!("{name}.conv1d"), x, tokens, di).into_iter().map(silu).collect();
    selective_ssm(store, &format!("{name}.ssm"), &h, tokens, di, cfg.state_size, cfg.dt_rank(), cfg.use_skip)
}

/// Order logits for one batch element of `[n*len, c]`.
pub fn ofm_logits(store: &ainet_tensor::ParamStore, name: &str, f: &[f64], n: usize, len: usize, c: usize) -> Vec<f64> {
    let mut pooled = vec![0.0; n * c];
    for i in 0..n {
        for t in 0..len {
            for ch in 0..c {
                pooled[i * c + ch] += f[(i * len + t) * c + ch];
            }
        }
    }
    for v in &mut pooled {
        *v /= len as f64;
    }
    let h: Vec<f64> = linear(store, &format!("{name}.order.mlp"), &pooled, n, c, c, true).into_iter().map(silu).collect();
    linear(store, &format!("{name}.order.fc"), &h, n, c, 1, true)
}

/// Branch-by-branch evaluation of the whole module for one batch element;
/// `layers[i]` is `[len, c]`.
pub fn ofm(store: &ainet_tensor::ParamStore, name: &str, cfg: &ainet_core::ofm::OfmConfig, layers: &[Vec<f64>], len: usize) -> Vec<f64> {
    let (n, c, di) = (layers.len(), cfg.model_dim, cfg.inner_dim());
    let tokens = n * len;
    let f: Vec<f64> = layers.concat();
    let logits = ofm_logits(store, name, &f, n, len, c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| logits[j].partial_cmp(&logits[i]).unwrap().then(i.cmp(&j)));

    let xz = linear(store, &format!("{name}.in_proj"), &f, tokens, c, 2 * di, true);
    let mut x = vec![0.0; tokens * di];
    let mut z = vec![0.0; tokens * di];
    for t in 0..tokens {
        x[t * di..(t + 1) * di].copy_from_slice(&xz[t * 2 * di..t * 2 * di + di]);
        for j in 0..di {
            z[t * di + j] = silu(xz[t * 2 * di + di + j]);
        }
    }
    let names = if cfg.share_branch_params {
        [format!("{name}.branch"), format!("{name}.branch"), format!("{name}.branch")]
    } else {
        [format!("{name}.branch_forward"), format!("{name}.branch_backward"), format!("{name}.branch_ordered")]
    };
    let reversed: Vec<usize> = (0..n).rev().collect();
    let y_fwd = ofm_branch(store, &names[0], cfg, &x, tokens);
    let y_bwd = reorder_rows(&ofm_branch(store, &names[1], cfg, &reorder_rows(&x, &reversed, len, di), tokens), &reversed, len, di);
    let y_ord = reorder_rows(&ofm_branch(store, &names[2], cfg, &reorder_rows(&x, &order, len, di), tokens), &inverse(&order), len, di);
    let mut gated = vec![0.0; tokens * di];
    for i in 0..tokens * di {
        gated[i] = y_fwd[i] * z[i] + y_bwd[i] * z[i] + y_ord[i] * z[i];
    }
    let out = linear(store, &format!("{name}.out_proj"), &gated, tokens, di, c, true);
    let mut result = vec![0.0; len * c];
    for i in 0..n {
        for j in 0..len * c {
            result[j] += out[i * len * c + j];
        }
    }
    result
}

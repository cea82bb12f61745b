//! Cost of the ordered fusion against a self-attention interaction over the
//! same all-layer token sequence.
//!
//! Counts follow the graph's per-op conventions (see `ainet_tensor::graph`)
//! and are given in closed form for batch 1. With `T = N*L` tokens, width `C`,
//! inner width `Di`, state size `S`, rank `R`, conv width `K` and skip flag
//! `s`, the ordered fusion costs
//!
//! ```text
//! mults_adds = 2T*C*Di + T*Di*C + 3T*Di*(K + 4 + 2R + 8S + 2s) + 8T*Di
//!              + 3T*C + N*C^2 + 4N*C + N
//! live       = 3T*Di*(8 + 3S) + 12T*R + 18T*S + 19T*Di + 7T*C + L*C + 8N*C + 4N
//! ```
//!
//! and the attention baseline with `H` heads costs
//!
//! ```text
//! mults_adds = 4T*C^2 + 2T^2*C + 4H*T^2 + 5T*C
//! live       = 28T*C + 3H*T^2 + L*C
//! ```
//!
//! The straight-through option adds `5N + T*Di` and `4N + 3T*Di`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ainet_core::nn::Linear;
use ainet_core::ofm::{LayerStack, Ofm, OfmConfig};
use ainet_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

/// Token counts of the default sweep.
pub const TOKEN_COUNTS: [usize; 6] = [320, 640, 1280, 1920, 2560, 3840];
/// Tokens per layer in the sweep: a 256 search and 128 template crop with
/// 16-pixel patches.
pub const LAYER_TOKENS: usize = 320;
/// Attention is not executed above this many tokens; its score tensors alone
/// grow as `3*H*T^2` values.
pub const ATTENTION_WALL_LIMIT: usize = 1920;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Model {
    Ofm,
    Attention,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Ofm => "ofm",
            Model::Attention => "attention",
        })
    }
}

impl FromStr for Model {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ofm" => Ok(Model::Ofm),
            "attention" => Ok(Model::Attention),
            other => Err(CliError::Parse(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub token_count: usize,
    pub model: Model,
    pub mults_adds: u64,
    pub peak_live_values: u64,
    /// Forward time, when the forward was run.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Closed-form cost of the ordered fusion over `n` layers of `l` tokens.
pub fn count_ofm_cost(n: usize, l: usize, c: usize, cfg: &OfmConfig) -> CostRow {
    let cfg = OfmConfig { model_dim: c, ..cfg.clone() };
    let (n, l, c) = (u(n), u(l), u(c));
    let t = n * l;
    let (di, s, k, r) = (u(cfg.inner_dim()), u(cfg.state_size), u(cfg.conv_width), u(cfg.dt_rank()));
    let skip = u64::from(cfg.use_skip);
    let mut mults = 2 * t * c * di + t * di * c + 3 * t * di * (k + 4 + 2 * r + 8 * s + 2 * skip) + 8 * t * di + 3 * t * c
        + n * c * c
        + 4 * n * c
        + n;
    let mut live = 3 * t * di * (8 + 3 * s) + 12 * t * r + 18 * t * s + 19 * t * di + 7 * t * c + l * c + 8 * n * c + 4 * n;
    if cfg.straight_through {
        mults += 5 * n + t * di;
        live += 4 * n + 3 * t * di;
    }
    CostRow {
        token_count: usize::try_from(t).expect("token count fits usize"),
        model: Model::Ofm,
        mults_adds: mults,
        peak_live_values: live,
        wall_ms: None,
    }
}

/// Closed-form cost of the attention baseline.
pub fn count_attention_cost(n: usize, l: usize, c: usize, heads: usize) -> CostRow {
    let (t, l, c, h) = (u(n * l), u(l), u(c), u(heads));
    CostRow {
        token_count: n * usize::try_from(l).expect("fits"),
        model: Model::Attention,
        mults_adds: 4 * t * c * c + 2 * t * t * c + 4 * h * t * t + 5 * t * c,
        peak_live_values: 28 * t * c + 3 * h * t * t + l * c,
        wall_ms: None,
    }
}

/// Multi-head self-attention over the concatenated layer tokens, summed
/// back over layers like the ordered fusion.
#[derive(Clone, Debug)]
pub struct AttentionInteraction {
    pub qkv: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl AttentionInteraction {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(CliError::Usage(format!("{heads} heads do not divide {channels} channels")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, true)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), channels, channels, true)?,
            heads,
            channels,
        })
    }

    /// `[B, N*L, C]` tokens of `stack` to `[B, L, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stack: &LayerStack) -> Result<Var> {
        let (n, l, b, c) = (stack.num_layers(), stack.tokens_per_layer(), stack.batch(), self.channels);
        let (t, h, dh) = (n * l, self.heads, self.channels / self.heads);
        let f = stack.concat(g)?;
        let qkv = self.qkv.forward(g, store, f)?;
        let parts = g.split(qkv, &[c, c, c], 2)?;
        let mut split_heads = |x: Var, axes: &[usize]| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, dh])?;
            Ok(g.permute(x, axes)?)
        };
        let q = split_heads(parts[0], &[0, 2, 1, 3])?;
        let k_t = split_heads(parts[1], &[0, 2, 3, 1])?;
        let v = split_heads(parts[2], &[0, 2, 1, 3])?;
        let scores = g.matmul(q, k_t)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, c])?;
        let out = self.out_proj.forward(g, store, ctx)?;
        let out = g.reshape(out, &[b, n, l, c])?;
        Ok(g.sum_axis(out, 1)?)
    }
}

/// Counts read off an executed forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measured {
    pub mults_adds: u64,
    pub live_values: u64,
    pub wall_ms: f64,
}

fn random_layers(g: &mut Graph, n: usize, l: usize, c: usize, seed: u64) -> Result<LayerStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = (0..n).map(|_| g.constant(Tensor::uniform(&[1, l, c], -1.0, 1.0, &mut rng))).collect();
    Ok(LayerStack::new(g, vars)?)
}

fn measure(g: &Graph, start: Instant) -> Measured {
    Measured {
        mults_adds: g.mults_adds(),
        live_values: u(g.live_values()),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Runs the ordered fusion once on random features and reads its counters.
pub fn run_ofm(n: usize, l: usize, c: usize, cfg: &OfmConfig, seed: u64) -> Result<Measured> {
    let mut store = ParamStore::new(seed);
    let ofm = Ofm::new(&mut store, "ofm", OfmConfig { model_dim: c, ..cfg.clone() })?;
    let mut g = Graph::new();
    let stack = random_layers(&mut g, n, l, c, seed)?;
    let start = Instant::now();
    ofm.forward(&mut g, &store, &stack)?;
    Ok(measure(&g, start))
}

/// Runs the attention baseline once on random features and reads its counters.
pub fn run_attention(n: usize, l: usize, c: usize, heads: usize, seed: u64) -> Result<Measured> {
    let mut store = ParamStore::new(seed);
    let att = AttentionInteraction::new(&mut store, "attention", c, heads)?;
    let mut g = Graph::new();
    let stack = random_layers(&mut g, n, l, c, seed)?;
    let start = Instant::now();
    att.forward(&mut g, &store, &stack)?;
    Ok(measure(&g, start))
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub token_counts: Vec<usize>,
    pub layer_tokens: usize,
    pub ofm: OfmConfig,
    pub heads: usize,
    /// Run forwards for timing; attention only up to `attention_wall_limit`.
    pub timed: bool,
    pub attention_wall_limit: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            token_counts: TOKEN_COUNTS.to_vec(),
            layer_tokens: LAYER_TOKENS,
            ofm: OfmConfig::new(channels),
            heads: 4,
            timed: true,
            attention_wall_limit: ATTENTION_WALL_LIMIT,
            seed: 0,
        }
    }
}

/// Analytic costs of both models at every token count, with measured
/// forward times where the forward was run.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<CostReport> {
    let (l, c) = (cfg.layer_tokens, cfg.ofm.model_dim);
    let mut counts = cfg.token_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    if counts.len() != cfg.token_counts.len() || l == 0 || c == 0 {
        return Err(CliError::Usage("token counts must be distinct and dimensions positive".into()));
    }
    let mut rows = Vec::with_capacity(2 * counts.len());
    for &t in &counts {
        if t == 0 || t % l != 0 {
            return Err(CliError::Usage(format!("{t} tokens is not a positive multiple of {l}")));
        }
        let n = t / l;
        let mut ofm = count_ofm_cost(n, l, c, &cfg.ofm);
        let mut att = count_attention_cost(n, l, c, cfg.heads);
        if cfg.timed {
            ofm.wall_ms = Some(run_ofm(n, l, c, &cfg.ofm, cfg.seed)?.wall_ms);
            if t <= cfg.attention_wall_limit {
                att.wall_ms = Some(run_attention(n, l, c, cfg.heads, cfg.seed)?.wall_ms);
            }
        }
        rows.push(ofm);
        rows.push(att);
    }
    Ok(CostReport { rows })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

impl CostReport {
    pub fn model_rows(&self, model: Model) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(move |r| r.model == model)
    }

    /// Log-log slope of multiply-adds against token count.
    pub fn slope(&self, model: Model) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .model_rows(model)
            .map(|r| (r.token_count as f64, r.mults_adds as f64))
            .collect();
        loglog_slope(&pts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        w.write_record(["token_count", "model", "mults_adds", "peak_live_values", "wall_ms"])?;
        for r in &self.rows {
            w.write_record([
                r.token_count.to_string(),
                r.model.to_string(),
                r.mults_adds.to_string(),
                r.peak_live_values.to_string(),
                r.wall_ms.map(|v| format!("{v:.5e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != ["token_count", "model", "mults_adds", "peak_live_values", "wall_ms"] {
            return Err(CliError::Parse(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let int = |i: usize| rec[i].parse::<u64>().map_err(|e| CliError::Parse(format!("{}: {e}", &rec[i])));
            let wall_ms = match &rec[4] {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| CliError::Parse(format!("{s}: {e}")))?),
            };
            rows.push(CostRow {
                token_count: usize::try_from(int(0)?).map_err(|e| CliError::Parse(e.to_string()))?,
                model: rec[1].parse()?,
                mults_adds: int(2)?,
                peak_live_values: int(3)?,
                wall_ms,
            });
        }
        Ok(Self { rows })
    }
}

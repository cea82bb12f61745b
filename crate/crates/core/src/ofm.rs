//! Order-dynamic fusion over all layers.
//!
//! The per-layer fused features are concatenated along the token axis into
//! one long sequence `F_all: [B, N*L, C]`. After a shared input projection the
//! sequence is scanned three times: in layer order, in reversed layer order,
//! and in an order predicted from the features themselves. Reordering always
//! moves whole `L`-token layer blocks, and each branch output is moved back to
//! canonical layer order before the branches are combined:
//!
//! ```text
//! [x, z]  = F_all W_in
//! y_k     = P_k^-1 Scan(SiLU(Conv(P_k x)))       k in {forward, backward, ordered}
//! out     = (sum_k y_k ⊙ SiLU(z)) W_out
//! result  = sum over the N layer chunks of out   -> [B, L, C]
//! ```
//!
//! The predicted order is a hard argsort, so no gradient reaches the order
//! predictor unless `straight_through` is enabled.

use ainet_tensor::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{CausalConv1d, Linear};
use crate::ssm::SelectiveSsm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfmConfig {
    pub model_dim: usize,
    pub expand: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub use_skip: bool,
    /// One convolution and scan parameter set for all three branches.
    pub share_branch_params: bool,
    /// Multiply the ordered branch by `1 + p - detach(p)`, with `p` the
    /// softmax of the order logits, so the predictor receives a gradient.
    pub straight_through: bool,
}

impl OfmConfig {
    pub fn new(model_dim: usize) -> Self {
        Self {
            model_dim,
            expand: 2,
            state_size: 16,
            conv_width: 4,
            use_skip: true,
            share_branch_params: true,
            straight_through: false,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.expand == 0 || self.state_size == 0 || self.conv_width == 0 {
            return Err(CoreError::Config(format!("ofm dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (c, di, n, k, r) = (
            self.model_dim,
            self.inner_dim(),
            self.state_size,
            self.conv_width,
            self.dt_rank(),
        );
        let skip = if self.use_skip { di } else { 0 };
        let branch = (di * k + di) + di * (r + 2 * n) + (r * di + di) + di * n + skip;
        let branches = if self.share_branch_params { 1 } else { 3 };
        let predictor = (c * c + c) + (c + 1);
        (c * 2 * di + 2 * di) + branches * branch + (di * c + c) + predictor
    }
}

/// `N` per-layer features of identical shape `[B, L, C]`, in layer order.
#[derive(Clone, Debug)]
pub struct LayerStack {
    layers: Vec<Var>,
    batch: usize,
    tokens: usize,
    channels: usize,
}

impl LayerStack {
    pub fn new(g: &Graph, layers: Vec<Var>) -> Result<Self> {
        let Some(&first) = layers.first() else {
            return Err(CoreError::Shape("empty layer stack".into()));
        };
        let shape = g.shape(first).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(CoreError::Shape(format!("layer features must be [B, L, C], got {shape:?}")));
        }
        if let Some((i, _)) = layers.iter().enumerate().find(|(_, &v)| g.shape(v) != shape.as_slice()) {
            return Err(CoreError::Shape(format!(
                "layer {i} has shape {:?}, layer 0 has {shape:?}",
                g.shape(layers[i])
            )));
        }
        Ok(Self {
            layers,
            batch: shape[0],
            tokens: shape[1],
            channels: shape[2],
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens_per_layer(&self) -> usize {
        self.tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.layers.len() * self.tokens
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[Var] {
        &self.layers
    }

    /// `[B, N*L, C]`.
    pub fn concat(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.concat(&self.layers, 1)?)
    }
}

/// A permutation of layer indices. Position `k` of a reordered sequence holds
/// layer `index[k]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScanOrder(Vec<usize>);

impl ScanOrder {
    pub fn new(index: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; index.len()];
        for &i in &index {
            if i >= index.len() || std::mem::replace(&mut seen[i], true) {
                return Err(CoreError::Shape(format!("{index:?} is not a permutation")));
            }
        }
        Ok(Self(index))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn reversed(n: usize) -> Self {
        Self((0..n).rev().collect())
    }

    /// Descending by logit, ties broken by ascending layer id.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
        Self(idx)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (k, &i) in self.0.iter().enumerate() {
            inv[i] = k;
        }
        Self(inv)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(k, &i)| k == i)
    }
}

/// Moves whole `block`-token layer chunks of `x: [B, N*block, C]`, one order
/// per batch element.
pub fn reorder_layers(g: &mut Graph, x: Var, block: usize, orders: &[ScanOrder]) -> Result<Var> {
    let perms: Vec<Vec<usize>> = orders.iter().map(|o| o.0.clone()).collect();
    Ok(g.permute_blocks(x, block, &perms)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
    /// One predicted order per batch element.
    Ordered(Vec<ScanOrder>),
}

/// Convolution plus selective scan over the inner width.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub conv: CausalConv1d,
    pub ssm: SelectiveSsm,
}

impl ScanBranch {
    fn new(store: &mut ParamStore, name: &str, cfg: &OfmConfig) -> Result<Self> {
        let di = cfg.inner_dim();
        Ok(Self {
            conv: CausalConv1d::new(store, &format!("{name}.conv1d"), di, cfg.conv_width)?,
            ssm: SelectiveSsm::new(store, &format!("{name}.ssm"), di, cfg.state_size, cfg.dt_rank(), cfg.use_skip)?,
        })
    }

    /// `Scan(SiLU(Conv(x)))` in the order the tokens are given.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        let h = g.silu(h);
        self.ssm.forward(g, store, h)
    }
}

/// Order predictor: per-layer mean pool, `Linear(C, C)` + SiLU, `Linear(C, 1)`.
#[derive(Clone, Debug)]
pub struct OrderPredictor {
    pub mlp: Linear,
    pub fc: Linear,
}

#[derive(Clone, Debug)]
pub struct OfmTrace {
    /// Tokens in the concatenated input.
    pub token_count: usize,
    pub orders: Vec<ScanOrder>,
    /// `[B, N]` order logits.
    pub logits: Var,
    /// Reordered inputs handed to the forward, backward and ordered scans.
    pub branch_inputs: [Var; 3],
    /// Branch outputs in canonical layer order, before gating.
    pub branch_outputs: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Ofm {
    pub cfg: OfmConfig,
    pub in_proj: Linear,
    /// Forward, backward, ordered. All three are clones when shared.
    pub branches: [ScanBranch; 3],
    pub out_proj: Linear,
    pub predictor: OrderPredictor,
}

impl Ofm {
    pub fn new(store: &mut ParamStore, name: &str, cfg: OfmConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, di) = (cfg.model_dim, cfg.inner_dim());
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), c, 2 * di, true)?;
        let branches = if cfg.share_branch_params {
            let b = ScanBranch::new(store, &format!("{name}.branch"), &cfg)?;
            [b.clone(), b.clone(), b]
        } else {
            [
                ScanBranch::new(store, &format!("{name}.branch_forward"), &cfg)?,
                ScanBranch::new(store, &format!("{name}.branch_backward"), &cfg)?,
                ScanBranch::new(store, &format!("{name}.branch_ordered"), &cfg)?,
            ]
        };
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, c, true)?;
        let predictor = OrderPredictor {
            mlp: Linear::new(store, &format!("{name}.order.mlp"), c, c, true)?,
            fc: Linear::new(store, &format!("{name}.order.fc"), c, 1, true)?,
        };
        Ok(Self {
            cfg,
            in_proj,
            branches,
            out_proj,
            predictor,
        })
    }

    pub fn num_params(&self) -> usize {
        self.cfg.param_count()
    }

    fn check_tokens(&self, g: &Graph, f: Var, layers: usize) -> Result<(usize, usize)> {
        let s = g.shape(f);
        if s.len() != 3 || layers == 0 || s[1] == 0 || s[1] % layers != 0 {
            return Err(CoreError::Shape(format!("{s:?} does not split into {layers} layers")));
        }
        Ok((s[0], s[1] / layers))
    }

    /// Order logits `[B, N]` and the argsorted orders.
    pub fn predict_scan_order(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_all: Var,
        layers: usize,
    ) -> Result<(Var, Vec<ScanOrder>)> {
        let (bsz, len) = self.check_tokens(g, f_all, layers)?;
        let c = self.cfg.model_dim;
        if g.shape(f_all)[2] != c {
            return Err(CoreError::Shape(format!("order predictor of width {c} got {:?}", g.shape(f_all))));
        }
        let blocks = g.reshape(f_all, &[bsz, layers, len, c])?;
        let pooled = g.mean_axis(blocks, 2)?;
        let h = self.predictor.mlp.forward(g, store, pooled)?;
        let h = g.silu(h);
        let logits = self.predictor.fc.forward(g, store, h)?;
        let logits = g.reshape(logits, &[bsz, layers])?;
        let orders = g
            .value(logits)
            .data()
            .chunks(layers)
            .map(ScanOrder::from_logits)
            .collect();
        Ok((logits, orders))
    }

    /// Runs one branch over `x: [B, N*L, Di]` and returns its output in
    /// canonical layer order, together with the reordered scan input.
    pub fn scan_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layers: usize,
        direction: &ScanDirection,
    ) -> Result<(Var, Var)> {
        let (bsz, len) = self.check_tokens(g, x, layers)?;
        let (branch, orders) = match direction {
            ScanDirection::Forward => {
                let y = self.branches[0].forward(g, store, x)?;
                return Ok((y, x));
            }
            ScanDirection::Backward => (&self.branches[1], vec![ScanOrder::reversed(layers); bsz]),
            ScanDirection::Ordered(o) => (&self.branches[2], o.clone()),
        };
        if orders.len() != bsz || orders.iter().any(|o| o.len() != layers) {
            return Err(CoreError::Shape(format!(
                "{} orders for batch {bsz} of {layers} layers",
                orders.len()
            )));
        }
        let input = reorder_layers(g, x, len, &orders)?;
        let y = branch.forward(g, store, input)?;
        let inverse: Vec<ScanOrder> = orders.iter().map(ScanOrder::inverse).collect();
        Ok((reorder_layers(g, y, len, &inverse)?, input))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stack: &LayerStack) -> Result<Var> {
        Ok(self.forward_traced(g, store, stack)?.0)
    }

    /// As [`Ofm::forward`], with the orders and branch tensors exposed.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, stack: &LayerStack) -> Result<(Var, OfmTrace)> {
        if stack.channels() != self.cfg.model_dim {
            return Err(CoreError::Shape(format!(
                "ofm of width {} got {} channels",
                self.cfg.model_dim,
                stack.channels()
            )));
        }
        let (n, len, bsz, c) = (stack.num_layers(), stack.tokens_per_layer(), stack.batch(), stack.channels());
        let di = self.cfg.inner_dim();
        let f_all = stack.concat(g)?;
        let (logits, orders) = self.predict_scan_order(g, store, f_all, n)?;

        let xz = self.in_proj.forward(g, store, f_all)?;
        let parts = g.split(xz, &[di, di], 2)?;
        let (x, z) = (parts[0], g.silu(parts[1]));

        let (y_fwd, in_fwd) = self.scan_branch(g, store, x, n, &ScanDirection::Forward)?;
        let (y_bwd, in_bwd) = self.scan_branch(g, store, x, n, &ScanDirection::Backward)?;
        let (mut y_ord, in_ord) = self.scan_branch(g, store, x, n, &ScanDirection::Ordered(orders.clone()))?;
        if self.cfg.straight_through {
            let p = g.softmax(logits);
            let p_const = g.detach(p);
            let delta = g.sub(p, p_const)?;
            let factor = g.affine(delta, 1.0, 1.0);
            let factor = g.reshape(factor, &[bsz, n, 1, 1])?;
            let blocks = g.reshape(y_ord, &[bsz, n, len, di])?;
            let scaled = g.mul(blocks, factor)?;
            y_ord = g.reshape(scaled, &[bsz, n * len, di])?;
        }

        let mut acc = g.mul(y_fwd, z)?;
        for y in [y_bwd, y_ord] {
            let gated = g.mul(y, z)?;
            acc = g.add(acc, gated)?;
        }
        let out = self.out_proj.forward(g, store, acc)?;
        let out = g.reshape(out, &[bsz, n, len, c])?;
        let result = g.sum_axis(out, 1)?;
        let trace = OfmTrace {
            token_count: n * len,
            orders,
            logits,
            branch_inputs: [in_fwd, in_bwd, in_ord],
            branch_outputs: [y_fwd, y_bwd, y_ord],
        };
        Ok((result, trace))
    }
}

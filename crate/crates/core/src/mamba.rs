//! The Mamba block: input projection, depthwise causal convolution, SiLU,
//! selective scan, multiplicative SiLU gate, output projection.
//!
//! With model width `C`, inner width `Di = E*C`, state size `N`, convolution
//! width `K` and step rank `R = ceil(C/16)`, the block holds
//!
//! ```text
//! in_proj   C*2Di + 2Di
//! conv      Di*K + Di
//! x_proj    Di*(R + 2N)
//! dt_proj   R*Di + Di
//! a_log     Di*N
//! d_skip    Di            (only with use_skip)
//! out_proj  Di*C + C
//! ```
//!
//! parameters; see [`MambaConfig::param_count`].

use ainet_tensor::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{CausalConv1d, Linear};
use crate::ssm::SelectiveSsm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    pub model_dim: usize,
    pub expand: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub use_skip: bool,
}

impl MambaConfig {
    /// `expand = 2`, `state_size = 16`, `conv_width = 4`, with skip.
    pub fn new(model_dim: usize) -> Self {
        Self {
            model_dim,
            expand: 2,
            state_size: 16,
            conv_width: 4,
            use_skip: true,
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
            return Err(CoreError::Config(format!("mamba dimensions must be positive: {self:?}")));
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
        (c * 2 * di + 2 * di) + (di * k + di) + di * (r + 2 * n) + (r * di + di) + di * n + skip + (di * c + c)
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub in_proj: Linear,
    pub conv: CausalConv1d,
    pub ssm: SelectiveSsm,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MambaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, di) = (cfg.model_dim, cfg.inner_dim());
        Ok(Self {
            in_proj: Linear::new(store, &format!("{name}.in_proj"), c, 2 * di, true)?,
            conv: CausalConv1d::new(store, &format!("{name}.conv1d"), di, cfg.conv_width)?,
            ssm: SelectiveSsm::new(store, &format!("{name}.ssm"), di, cfg.state_size, cfg.dt_rank(), cfg.use_skip)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), di, c, true)?,
            cfg,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_proj.num_params() + self.conv.num_params() + self.ssm.num_params() + self.out_proj.num_params()
    }

    /// `[B, L, C] -> [B, L, C]`, causal along `L`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.model_dim || shape[1] == 0 {
            return Err(CoreError::Shape(format!(
                "mamba block of width {} got input {shape:?}",
                self.cfg.model_dim
            )));
        }
        let di = self.cfg.inner_dim();
        let xz = self.in_proj.forward(g, store, x)?;
        let parts = g.split(xz, &[di, di], 2)?;
        let (xs, z) = (parts[0], parts[1]);
        let xs = self.conv.forward(g, store, xs)?;
        let xs = g.silu(xs);
        let y = self.ssm.forward(g, store, xs)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        self.out_proj.forward(g, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ainet_tensor::Tensor;

    #[test]
    fn param_count_matches_registered_params() {
        for (c, use_skip) in [(4, true), (32, true), (20, false)] {
            let cfg = MambaConfig {
                use_skip,
                ..MambaConfig::new(c)
            };
            let mut store = ParamStore::new(0);
            let block = MambaBlock::new(&mut store, "m", cfg.clone()).unwrap();
            assert_eq!(store.num_scalars(), cfg.param_count());
            assert_eq!(block.num_params(), cfg.param_count());
        }
        // C=32: Di=64, R=2: 4224 + 320 + 2176 + 192 + 1024 + 64 + 2080
        assert_eq!(MambaConfig::new(32).param_count(), 10080);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut store = ParamStore::new(0);
        let block = MambaBlock::new(&mut store, "m", MambaConfig::new(4)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(block.forward(&mut g, &store, x).is_err());
    }
}

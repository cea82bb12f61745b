//! Difference-based fusion.
//!
//! The modality difference `x_rgb - x_tir` is filtered by a Mamba block and
//! squashed by `tanh` into a shared gate `g`. Each modality is then
//! compensated with the *other* modality scaled by the gate,
//!
//! ```text
//! x̂_rgb = x_rgb + x_tir ⊙ g
//! x̂_tir = x_tir + x_rgb ⊙ g
//! ```
//!
//! and the pair is fused by `tanh(LN([x̂_rgb, x̂_tir] W))` with `W: [2C, C]`.

use ainet_tensor::{Graph, Init, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::nn::LayerNorm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfmConfig {
    pub mamba: MambaConfig,
    /// Fuse the enhanced features (true) or the raw inputs (false).
    pub fuse_enhanced: bool,
}

impl DfmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            mamba: MambaConfig::new(channels),
            fuse_enhanced: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.mamba.model_dim
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels();
        self.mamba.param_count() + 2 * c * c + 2 * c
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DfmOutput {
    pub rgb: Var,
    pub tir: Var,
    pub fused: Var,
}

/// One per backbone layer; layers never share parameters.
#[derive(Clone, Debug)]
pub struct Dfm {
    pub cfg: DfmConfig,
    pub layer: usize,
    pub mamba: MambaBlock,
    pub fuse_weight: ParamId,
    pub norm: LayerNorm,
}

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(CoreError::Shape(format!(
            "modality shapes differ: rgb {:?}, tir {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

impl Dfm {
    pub fn new(store: &mut ParamStore, prefix: &str, layer: usize, cfg: DfmConfig) -> Result<Self> {
        let c = cfg.channels();
        let name = format!("{prefix}.{layer}");
        Ok(Self {
            mamba: MambaBlock::new(store, &format!("{name}.mamba"), cfg.mamba.clone())?,
            fuse_weight: store.register(format!("{name}.fuse.weight"), &[2 * c, c], Init::fan_in(2 * c))?,
            norm: LayerNorm::new(store, &format!("{name}.fuse.norm"), c)?,
            layer,
            cfg,
        })
    }

    /// `tanh(Mamba(x_rgb - x_tir))`.
    pub fn difference_gate(&self, g: &mut Graph, store: &ParamStore, rgb: Var, tir: Var) -> Result<Var> {
        same_shape(g, rgb, tir)?;
        let diff = g.sub(rgb, tir)?;
        let m = self.mamba.forward(g, store, diff)?;
        Ok(g.tanh(m))
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, rgb: Var, tir: Var) -> Result<Var> {
        let w = g.param(store, self.fuse_weight);
        let gamma = g.param(store, self.norm.gamma);
        let beta = g.param(store, self.norm.beta);
        fuse(g, rgb, tir, w, gamma, beta, self.norm.eps)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rgb: Var, tir: Var) -> Result<DfmOutput> {
        let gate = self.difference_gate(g, store, rgb, tir)?;
        let (rgb_hat, tir_hat) = enhance(g, rgb, tir, gate)?;
        let fused = if self.cfg.fuse_enhanced {
            self.fuse(g, store, rgb_hat, tir_hat)?
        } else {
            self.fuse(g, store, rgb, tir)?
        };
        Ok(DfmOutput {
            rgb: rgb_hat,
            tir: tir_hat,
            fused,
        })
    }
}

/// Cross-modal compensation with a shared gate.
pub fn enhance(g: &mut Graph, rgb: Var, tir: Var, gate: Var) -> Result<(Var, Var)> {
    same_shape(g, rgb, tir)?;
    same_shape(g, rgb, gate)?;
    let tir_gated = g.mul(tir, gate)?;
    let rgb_gated = g.mul(rgb, gate)?;
    Ok((g.add(rgb, tir_gated)?, g.add(tir, rgb_gated)?))
}

/// `tanh(LN([rgb, tir] W))` with `W: [2C, C]`.
pub fn fuse(g: &mut Graph, rgb: Var, tir: Var, weight: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    same_shape(g, rgb, tir)?;
    let c = *g.shape(rgb).last().unwrap_or(&0);
    if g.shape(weight) != [2 * c, c] {
        return Err(CoreError::Shape(format!(
            "fusion weight must be [{}, {c}], got {:?}",
            2 * c,
            g.shape(weight)
        )));
    }
    let cat = g.concat(&[rgb, tir], 2)?;
    let y = g.matmul(cat, weight)?;
    let y = g.layer_norm(y, gamma, beta, eps)?;
    Ok(g.tanh(y))
}

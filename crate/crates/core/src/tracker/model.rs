//! The tracker: shared-weight two-stream backbone, per-layer fusion, all-layer
//! fusion and a center-heatmap head.
//!
//! Each modality is patch-embedded into `[search tokens, template tokens]`.
//! Both streams run through the same backbone blocks (they are stacked along
//! the batch axis, so the weights are shared by construction). Depending on
//! the fusion mode, a difference-fusion module after every block feeds its
//! enhanced features into the next block, and the order-dynamic module
//! combines the per-layer fused features into one `[B, L, C]` map for the
//! head.

use ainet_tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

use super::config::{FusionMode, PipelineConfig};
use super::data::{BBox, TrackSample};
use crate::dfm::{Dfm, DfmConfig, DfmOutput};
use crate::error::{CoreError, Result};
use crate::mamba::MambaConfig;
use crate::nn::{LayerNorm, Linear};
use crate::ofm::{LayerStack, Ofm, OfmConfig, OfmTrace};

/// Splits `[size, size]` frames into row-major `patch x patch` patches:
/// `[B, (size/patch)^2, patch^2]`.
pub fn patchify(frames: &[&Tensor], patch: usize) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Err(CoreError::Shape("no frames to patchify".into()));
    };
    let size = first.shape()[0];
    if patch == 0 || size % patch != 0 || frames.iter().any(|f| f.shape() != [size, size]) {
        return Err(CoreError::Shape(format!(
            "frames of shape {:?} do not split into {patch}-pixel patches",
            first.shape()
        )));
    }
    let grid = size / patch;
    let mut out = Vec::with_capacity(frames.len() * size * size);
    for f in frames {
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..patch {
                    let row = (gy * patch + y) * size + gx * patch;
                    out.extend_from_slice(&f.data()[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![frames.len(), grid * grid, patch * patch], out)?)
}

/// Linear patch projection shared by both modalities.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    /// `[B, P, patch^2] -> [B, P, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        self.proj.forward(g, store, patches)
    }
}

/// Pre-norm multi-head self-attention followed by a SiLU MLP, both residual.
#[derive(Clone, Debug)]
pub struct BackboneBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl BackboneBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(CoreError::Config(format!("{heads} heads for {channels} channels")));
        }
        let hidden = mlp_ratio * channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), channels, 3 * channels, true)?,
            attn_out: Linear::new(store, &format!("{name}.attn.out"), channels, channels, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), channels, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, channels, true)?,
            heads,
            channels,
        })
    }

    pub fn param_count(channels: usize, mlp_ratio: usize) -> usize {
        let (c, h) = (channels, mlp_ratio * channels);
        4 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * h + h) + (h * c + c)
    }

    /// Returns the attention probabilities `[B, H, L, L]` with the output.
    pub fn forward_with_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(CoreError::Shape(format!(
                "backbone block of width {} got {shape:?}",
                self.channels
            )));
        }
        let (b, l, c, h) = (shape[0], shape[1], shape[2], self.heads);
        let dh = c / h;
        let xn = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, xn)?;
        let qkv = g.reshape(qkv, &[b, l, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let parts = g.split(qkv, &[1, 1, 1], 0)?;
        let q = g.reshape(parts[0], &[b, h, l, dh])?;
        let k = g.reshape(parts[1], &[b, h, l, dh])?;
        let v = g.reshape(parts[2], &[b, h, l, dh])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, c])?;
        let y = self.attn_out.forward(g, store, ctx)?;
        let x = g.add(x, y)?;

        let xn = self.norm2.forward(g, store, x)?;
        let hdn = self.fc1.forward(g, store, xn)?;
        let hdn = g.silu(hdn);
        let y = self.fc2.forward(g, store, hdn)?;
        Ok((g.add(x, y)?, attn))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, x)?.0)
    }
}

/// Center heatmap over search tokens, plus per-token box parameters
/// `(offset_x, offset_y, width, height)` before the sigmoid.
#[derive(Clone, Debug)]
pub struct Head {
    pub norm: LayerNorm,
    pub score: Linear,
    pub boxes: Linear,
}

impl Head {
    pub fn param_count(channels: usize) -> usize {
        2 * channels + (channels + 1) + (4 * channels + 4)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, S]` over search tokens.
    pub logits: Var,
    pub heatmap: Var,
    /// `[B, S, 4]`.
    pub boxes: Var,
}

/// Graph handles recorded during [`Ainet::forward`] for wiring checks.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// `(rgb, tir)` fed to each backbone block.
    pub block_inputs: Vec<(Var, Var)>,
    /// `(rgb, tir)` produced by each backbone block.
    pub block_outputs: Vec<(Var, Var)>,
    pub dfm: Vec<DfmOutput>,
    /// Per-layer features handed to the order-dynamic module, in order.
    pub ofm_inputs: Vec<Var>,
    pub ofm: Option<OfmTrace>,
    /// `[B, L, C]` map the head reads.
    pub head_input: Option<Var>,
}

/// Network inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B, search tokens, patch^2]`.
    pub search_rgb: Tensor,
    pub search_tir: Tensor,
    /// `[B, template tokens, patch^2]`.
    pub template_rgb: Tensor,
    pub template_tir: Tensor,
}

impl Batch {
    pub fn new(samples: &[&TrackSample], patch: usize) -> Result<Self> {
        let pick = |f: fn(&TrackSample) -> &Tensor| -> Result<Tensor> {
            let frames: Vec<&Tensor> = samples.iter().map(|s| f(s)).collect();
            patchify(&frames, patch)
        };
        Ok(Self {
            size: samples.len(),
            search_rgb: pick(|s| &s.rgb)?,
            search_tir: pick(|s| &s.tir)?,
            template_rgb: pick(|s| &s.template_rgb)?,
            template_tir: pick(|s| &s.template_tir)?,
        })
    }
}

/// Supervision for a batch: the search token holding the box center, the
/// center offset inside that token, and the box size relative to the frame.
#[derive(Clone, Debug)]
pub struct Targets {
    pub token: Vec<usize>,
    /// `[B, S]`.
    pub onehot: Tensor,
    /// `[B, 4]`, all entries in `[0, 1]`.
    pub boxes: Tensor,
}

impl Targets {
    pub fn new(boxes: &[BBox], cfg: &PipelineConfig) -> Result<Self> {
        let (p, s) = (cfg.patch as f64, cfg.search_size as f64);
        let grid = cfg.search_size / cfg.patch;
        let mut token = Vec::with_capacity(boxes.len());
        let mut onehot = Tensor::zeros(&[boxes.len(), grid * grid]);
        let mut reg = Vec::with_capacity(4 * boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            let col = ((b.cx / p).floor() as usize).min(grid - 1);
            let row = ((b.cy / p).floor() as usize).min(grid - 1);
            let t = row * grid + col;
            token.push(t);
            onehot.set(&[i, t], 1.0);
            reg.extend([
                (b.cx / p - col as f64).clamp(0.0, 1.0),
                (b.cy / p - row as f64).clamp(0.0, 1.0),
                (b.w / s).clamp(0.0, 1.0),
                (b.h / s).clamp(0.0, 1.0),
            ]);
        }
        Ok(Self {
            token,
            onehot,
            boxes: Tensor::new(vec![boxes.len(), 4], reg)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ainet {
    pub cfg: PipelineConfig,
    pub embed: PatchEmbed,
    /// `[L, C]`, added to both modalities.
    pub pos: ParamId,
    pub blocks: Vec<BackboneBlock>,
    pub dfms: Vec<Dfm>,
    pub ofm: Option<Ofm>,
    pub head: Head,
}

impl Ainet {
    pub fn mamba_config(cfg: &PipelineConfig) -> MambaConfig {
        MambaConfig {
            state_size: cfg.state_size,
            ..MambaConfig::new(cfg.channels)
        }
    }

    pub fn ofm_config(cfg: &PipelineConfig) -> OfmConfig {
        OfmConfig {
            state_size: cfg.state_size,
            ..OfmConfig::new(cfg.channels)
        }
    }

    pub fn new(store: &mut ParamStore, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let embed = PatchEmbed {
            proj: Linear::new(store, "embed.proj", cfg.patch * cfg.patch, c, true)?,
            patch: cfg.patch,
        };
        let pos = store.register("embed.pos", &[cfg.tokens(), c], Init::Normal { std: 0.02 })?;
        let blocks = (0..cfg.num_layers)
            .map(|i| BackboneBlock::new(store, &format!("blocks.{i}"), c, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let dfms = if cfg.fusion_mode.uses_dfm() {
            let dcfg = DfmConfig {
                mamba: Self::mamba_config(cfg),
                fuse_enhanced: true,
            };
            (0..cfg.num_layers)
                .map(|i| Dfm::new(store, "dfm", i, dcfg.clone()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let ofm = cfg
            .fusion_mode
            .uses_ofm()
            .then(|| Ofm::new(store, "ofm", Self::ofm_config(cfg)))
            .transpose()?;
        let head = Head {
            norm: LayerNorm::new(store, "head.norm", c)?,
            score: Linear::new(store, "head.score", c, 1, true)?,
            boxes: Linear::new(store, "head.box", c, 4, true)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            dfms,
            ofm,
            head,
        })
    }

    /// Closed-form parameter count; the fusion mode only adds modules.
    pub fn param_count(cfg: &PipelineConfig) -> usize {
        let c = cfg.channels;
        let mut n = (cfg.patch * cfg.patch * c + c) + cfg.tokens() * c;
        n += cfg.num_layers * BackboneBlock::param_count(c, cfg.mlp_ratio);
        if cfg.fusion_mode.uses_dfm() {
            let dfm = DfmConfig {
                mamba: Self::mamba_config(cfg),
                fuse_enhanced: true,
            };
            n += cfg.num_layers * dfm.param_count();
        }
        if cfg.fusion_mode.uses_ofm() {
            n += Self::ofm_config(cfg).param_count();
        }
        n + Head::param_count(c)
    }

    /// Embeds one modality: `[B, search + template tokens, C]`.
    pub fn embed_modality(&self, g: &mut Graph, store: &ParamStore, search: &Tensor, template: &Tensor) -> Result<Var> {
        let s = g.constant(search.clone());
        let t = g.constant(template.clone());
        let s = self.embed.forward(g, store, s)?;
        let t = self.embed.forward(g, store, t)?;
        let x = g.concat(&[s, t], 1)?;
        let pos = g.param(store, self.pos);
        Ok(g.add(x, pos)?)
    }

    /// Runs one block on both streams at once.
    fn run_block(&self, g: &mut Graph, store: &ParamStore, i: usize, rgb: Var, tir: Var) -> Result<(Var, Var)> {
        let b = g.shape(rgb)[0];
        let both = g.concat(&[rgb, tir], 0)?;
        let out = self.blocks[i].forward(g, store, both)?;
        let parts = g.split(out, &[b, b], 0)?;
        Ok((parts[0], parts[1]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<(HeadOutput, ForwardTrace)> {
        let mut rgb = self.embed_modality(g, store, &batch.search_rgb, &batch.template_rgb)?;
        let mut tir = self.embed_modality(g, store, &batch.search_tir, &batch.template_tir)?;
        let mut trace = ForwardTrace::default();
        let mode = self.cfg.fusion_mode;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            trace.block_inputs.push((rgb, tir));
            let (r, t) = self.run_block(g, store, i, rgb, tir)?;
            trace.block_outputs.push((r, t));
            if mode.uses_dfm() {
                let out = self.dfms[i].forward(g, store, r, t)?;
                trace.dfm.push(out);
                per_layer.push(out.fused);
                (rgb, tir) = (out.rgb, out.tir);
            } else {
                if mode.uses_ofm() {
                    per_layer.push(g.add(r, t)?);
                }
                (rgb, tir) = (r, t);
            }
        }
        let fused = match mode {
            FusionMode::BaselineAdd => g.add(rgb, tir)?,
            FusionMode::DfmOnly => *per_layer.last().expect("at least one layer"),
            FusionMode::OfmOnly | FusionMode::DfmOfm => {
                let ofm = self.ofm.as_ref().expect("ofm built for this mode");
                trace.ofm_inputs = per_layer.clone();
                let stack = LayerStack::new(g, per_layer)?;
                let (y, t) = ofm.forward_traced(g, store, &stack)?;
                trace.ofm = Some(t);
                y
            }
        };
        trace.head_input = Some(fused);
        Ok((self.head_forward(g, store, fused)?, trace))
    }

    /// Reads the search tokens of `fused: [B, L, C]`.
    pub fn head_forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<HeadOutput> {
        let b = g.shape(fused)[0];
        let s = self.cfg.search_tokens();
        let search = g.slice(fused, 1, 0, s)?;
        let h = self.head.norm.forward(g, store, search)?;
        let logits = self.head.score.forward(g, store, h)?;
        let logits = g.reshape(logits, &[b, s])?;
        let heatmap = g.softmax(logits);
        let boxes = self.head.boxes.forward(g, store, h)?;
        Ok(HeadOutput { logits, heatmap, boxes })
    }

    /// Heatmap cross-entropy with a `(1 - p)^gamma` weight on each sample,
    /// plus `box_weight` times the L1 error of the box parameters read at the
    /// true center token. The focal weight is treated as a constant.
    pub fn loss(&self, g: &mut Graph, out: &HeadOutput, targets: &Targets) -> Result<Var> {
        let t = &self.cfg.train;
        let b = targets.token.len();
        let lp = g.log_softmax(out.logits);
        let onehot = g.constant(targets.onehot.clone());
        let picked = g.mul(lp, onehot)?;
        let lp_gt = g.sum_axis(picked, 1)?;
        let weights: Vec<f64> = g
            .value(lp_gt)
            .data()
            .iter()
            .map(|l| (1.0 - l.exp()).max(0.0).powf(t.focal_gamma))
            .collect();
        let weights = g.constant(Tensor::new(vec![b], weights)?);
        let weighted = g.mul(lp_gt, weights)?;
        let ce = g.mean(weighted);
        let ce = g.scale(ce, -1.0);

        let at_center = g.gather_rows(out.boxes, &targets.token)?;
        let pred = g.sigmoid(at_center);
        let target = g.constant(targets.boxes.clone());
        let err = g.sub(pred, target)?;
        let err = g.abs(err);
        let l1 = g.mean(err);
        let l1 = g.scale(l1, t.box_weight);
        Ok(g.add(ce, l1)?)
    }

    /// Boxes decoded at the heatmap argmax (first index on ties).
    pub fn decode(&self, g: &Graph, out: &HeadOutput) -> Vec<BBox> {
        let (p, s) = (self.cfg.patch as f64, self.cfg.search_size as f64);
        let grid = self.cfg.search_size / self.cfg.patch;
        let heat = g.value(out.heatmap);
        let boxes = g.value(out.boxes);
        let n = grid * grid;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        heat.data()
            .chunks(n)
            .enumerate()
            .map(|(bi, row)| {
                let t = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                let r = &boxes.data()[(bi * n + t) * 4..(bi * n + t) * 4 + 4];
                let (col, rw) = ((t % grid) as f64, (t / grid) as f64);
                BBox {
                    cx: (col + sig(r[0])) * p,
                    cy: (rw + sig(r[1])) * p,
                    w: (sig(r[2]) * s).max(1e-6),
                    h: (sig(r[3]) * s).max(1e-6),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_layout() {
        let f = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&[&f], 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(patchify(&[&f], 3).is_err());
    }

    #[test]
    fn targets_locate_center_token() {
        let cfg = PipelineConfig::default();
        let b = BBox::new(20.0, 43.0, 10.0, 12.0).unwrap();
        let t = Targets::new(&[b], &cfg).unwrap();
        assert_eq!(t.token, vec![5 * 8 + 2]);
        let r = t.boxes.data();
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.375).abs() < 1e-15);
        assert!((r[2] - 10.0 / 64.0).abs() < 1e-15);
    }
}

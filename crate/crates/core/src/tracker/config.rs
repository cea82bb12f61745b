use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Last-layer elementwise sum of the two streams.
    BaselineAdd,
    /// Per-layer difference fusion; the head reads the last layer's fused feature.
    DfmOnly,
    /// All-layer order-dynamic fusion over per-layer sums of the two streams.
    OfmOnly,
    DfmOfm,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::BaselineAdd, Self::DfmOnly, Self::OfmOnly, Self::DfmOfm];

    pub fn uses_dfm(self) -> bool {
        matches!(self, Self::DfmOnly | Self::DfmOfm)
    }

    pub fn uses_ofm(self) -> bool {
        matches!(self, Self::OfmOnly | Self::DfmOfm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BaselineAdd => "baseline_add",
            Self::DfmOnly => "dfm_only",
            Self::OfmOnly => "ofm_only",
            Self::DfmOfm => "dfm_ofm",
        }
    }
}

/// Training schedule and data sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Evaluate on the test split every this many steps (and after the last).
    pub eval_every: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames_per_sequence: usize,
    /// Exponent of the `(1 - p)` factor in the heatmap loss.
    pub focal_gamma: f64,
    pub box_weight: f64,
    /// Per-pixel Gaussian noise of the synthetic frames.
    pub noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            eval_every: 500,
            train_sequences: 64,
            test_sequences: 16,
            frames_per_sequence: 12,
            focal_gamma: 2.0,
            box_weight: 5.0,
            noise: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub search_size: usize,
    pub template_size: usize,
    pub patch: usize,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// State size of every selective scan in the fusion modules.
    pub state_size: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            channels: 32,
            search_size: 64,
            template_size: 32,
            patch: 8,
            fusion_mode: FusionMode::DfmOfm,
            seed: 0,
            heads: 4,
            mlp_ratio: 2,
            state_size: 16,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// 12 layers at 256/128/16.
    pub fn full_scale() -> Self {
        Self {
            num_layers: 12,
            search_size: 256,
            template_size: 128,
            patch: 16,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.patch == 0 || self.search_size % self.patch != 0 || self.template_size % self.patch != 0 {
            return bad(format!(
                "search {} and template {} must be positive multiples of patch {}",
                self.search_size, self.template_size, self.patch
            ));
        }
        if self.search_size == 0 || self.template_size == 0 {
            return bad("frame sizes must be positive".into());
        }
        if self.num_layers == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.state_size == 0 {
            return bad("num_layers, channels, mlp_ratio and state_size must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.eval_every == 0 || t.frames_per_sequence == 0 {
            return bad("steps, batch_size, eval_every and frames_per_sequence must be positive".into());
        }
        if t.train_sequences == 0 || t.test_sequences == 0 {
            return bad("both splits need at least one sequence".into());
        }
        if !(t.lr > 0.0) || !(t.noise >= 0.0) || !(t.focal_gamma >= 0.0) || !(t.box_weight >= 0.0) {
            return bad("lr must be positive; noise, focal_gamma and box_weight non-negative".into());
        }
        Ok(())
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch).pow(2)
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    /// Tokens per layer per modality.
    pub fn tokens(&self) -> usize {
        self.search_tokens() + self.template_tokens()
    }

    /// Length of the concatenated all-layer sequence.
    pub fn all_layer_tokens(&self) -> usize {
        self.num_layers * self.tokens()
    }
}

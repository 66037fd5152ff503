//! Model hyperparameters and parameter initialization for the whole network.

use crate::contrastive;
use crate::data::{CLASS_NAMES, TEMPLATES};
use crate::nn::Init;
use crate::tensorcore::ParamStore;
use crate::{backbone, condgen};

/// How the decoder reduces the assembled sequence to one global feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPool {
    /// A learned query cross-attends to the sequence.
    Query,
    /// Mean over tokens followed by the head.
    Mean,
}

impl std::str::FromStr for GlobalPool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" => Ok(Self::Query),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown pooling `{other}` (expected query or mean)")),
        }
    }
}

impl std::fmt::Display for GlobalPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Query => "query",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub groups: usize,
    pub group_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_hidden: usize,
    pub pos_hidden: usize,
    pub decoder_depth: usize,
    pub global_pool: GlobalPool,
    pub feat_dim: usize,
    pub proj_hidden: usize,
    pub cond_dim: usize,
    pub h2_hidden: usize,
    /// Input widths of the six denoiser blocks; the last block keeps its width.
    pub dip_widths: Vec<usize>,
    pub dip_knn: usize,
    pub te_dim: usize,
    pub dip_gate: bool,
    pub zero_init_modulation: bool,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub classes: usize,
    pub templates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            groups: 64,
            group_size: 32,
            embed_dim: 384,
            depth: 6,
            heads: 6,
            mlp_ratio: 4,
            patch_hidden: 128,
            pos_hidden: 128,
            decoder_depth: 2,
            global_pool: GlobalPool::Query,
            feat_dim: 256,
            proj_hidden: 256,
            cond_dim: 256,
            h2_hidden: 64,
            dip_widths: vec![3, 128, 256, 512, 256, 128],
            dip_knn: 8,
            te_dim: 128,
            dip_gate: true,
            zero_init_modulation: false,
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            classes: 5,
            templates: 8,
        }
    }
}

impl ModelConfig {
    /// `(input, output)` width of every denoiser block.
    pub fn dip_block_widths(&self) -> Vec<(usize, usize)> {
        let w = &self.dip_widths;
        (0..w.len()).map(|i| (w[i], if i + 1 < w.len() { w[i + 1] } else { w[i] })).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_hidden", self.patch_hidden),
            ("pos_hidden", self.pos_hidden),
            ("feat_dim", self.feat_dim),
            ("proj_hidden", self.proj_hidden),
            ("cond_dim", self.cond_dim),
            ("h2_hidden", self.h2_hidden),
            ("dip_knn", self.dip_knn),
            ("te_dim", self.te_dim),
            ("steps", self.steps),
            ("classes", self.classes),
            ("templates", self.templates),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.groups < 5 {
            return Err("groups must be at least 5 for the kernel-5 pyramid".into());
        }
        if self.classes > CLASS_NAMES.len() || self.templates > TEMPLATES.len() {
            return Err(format!("at most {} classes and {} templates", CLASS_NAMES.len(), TEMPLATES.len()));
        }
        if self.te_dim % 2 != 0 {
            return Err("te_dim must be even".into());
        }
        if self.dip_widths.first() != Some(&3) {
            return Err("dip_widths must start at 3".into());
        }
        if self.dip_block_widths().iter().any(|&(_, o)| o == 0 || o % 2 != 0) {
            return Err("dip block output widths must be positive and even".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err("need 0 < beta_start <= beta_end < 1".into());
        }
        Ok(())
    }
}

/// Every trainable and frozen tensor, deterministically from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    {
        let mut init = Init::new(&mut store, seed);
        backbone::init_encoder(&mut init, cfg);
        backbone::init_decoder(&mut init, cfg);
        condgen::init_h2(&mut init, cfg);
        condgen::init_dip(&mut init, cfg);
        contrastive::init_heads(&mut init, cfg);
        contrastive::init_image_teacher(&mut init, cfg);
    }
    contrastive::init_text_teacher(&mut store, cfg);
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_denoiser_chain() {
        let cfg = ModelConfig::default();
        let widths = cfg.dip_block_widths();
        assert_eq!(widths.len(), 6);
        assert_eq!(widths.iter().map(|w| w.0).collect::<Vec<_>>(), vec![3, 128, 256, 512, 256, 128]);
        assert_eq!(widths[5], (128, 128));
        cfg.validate().unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig { embed_dim: 16, heads: 2, depth: 1, dip_widths: vec![3, 8, 8], ..ModelConfig::default() };
        assert_eq!(init_params(&cfg, 3), init_params(&cfg, 3));
        assert_ne!(init_params(&cfg, 3), init_params(&cfg, 4));
    }
}

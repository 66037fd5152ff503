//! Plain-text run configuration: one `key = value` per line, `#` comments.

use std::path::PathBuf;

use super::HarnessError;
use crate::model::{GlobalPool, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs * steps_per_epoch` when set.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub drop_path: f64,
    pub mask_ratio: f64,
    pub tau: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
    pub diffusion: bool,
    pub contrast_img: bool,
    pub contrast_text: bool,
    pub self_modal: bool,
    pub smooth_l1: bool,
    pub freeze_teachers: bool,
    pub stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            max_steps: None,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            batch_size: 16,
            drop_path: 0.1,
            mask_ratio: 0.6,
            tau: 0.1,
            seed: 0,
            checkpoint_every: 1,
            train_limit: None,
            diffusion: true,
            contrast_img: true,
            contrast_text: true,
            self_modal: false,
            smooth_l1: false,
            freeze_teachers: true,
            stop_gradient: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    /// Fixed FPS start and zero wall-clock column, for reproducible logs.
    pub test_mode: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| HarnessError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_opt(key: &str, v: &str) -> Result<Option<usize>, HarnessError> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "groups" => m.groups = parse_num(key, v)?,
            "group_size" => m.group_size = parse_num(key, v)?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "depth" => m.depth = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, v)?,
            "patch_hidden" => m.patch_hidden = parse_num(key, v)?,
            "pos_hidden" => m.pos_hidden = parse_num(key, v)?,
            "decoder_depth" => m.decoder_depth = parse_num(key, v)?,
            "global_pool" => m.global_pool = v.parse::<GlobalPool>().map_err(HarnessError::Config)?,
            "feat_dim" => m.feat_dim = parse_num(key, v)?,
            "proj_hidden" => m.proj_hidden = parse_num(key, v)?,
            "cond_dim" => m.cond_dim = parse_num(key, v)?,
            "h2_hidden" => m.h2_hidden = parse_num(key, v)?,
            "dip_widths" => {
                m.dip_widths = v.split(',').map(|w| parse_num(key, w.trim())).collect::<Result<_, _>>()?;
            }
            "dip_knn" => m.dip_knn = parse_num(key, v)?,
            "te_dim" => m.te_dim = parse_num(key, v)?,
            "dip_gate" => m.dip_gate = parse_bool(key, v)?,
            "zero_init_modulation" => m.zero_init_modulation = parse_bool(key, v)?,
            "steps" => m.steps = parse_num(key, v)?,
            "beta_start" => m.beta_start = parse_num(key, v)?,
            "beta_end" => m.beta_end = parse_num(key, v)?,
            "classes" => m.classes = parse_num(key, v)?,
            "templates" => m.templates = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "max_steps" => t.max_steps = parse_opt(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "min_lr" => t.min_lr = parse_num(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse_num(key, v)?,
            "beta1" => t.beta1 = parse_num(key, v)?,
            "beta2" => t.beta2 = parse_num(key, v)?,
            "adam_eps" => t.adam_eps = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "drop_path" => t.drop_path = parse_num(key, v)?,
            "mask_ratio" => t.mask_ratio = parse_num(key, v)?,
            "tau" => t.tau = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train_limit" => t.train_limit = parse_opt(key, v)?,
            "diffusion" => t.diffusion = parse_bool(key, v)?,
            "contrast_img" => t.contrast_img = parse_bool(key, v)?,
            "contrast_text" => t.contrast_text = parse_bool(key, v)?,
            "self_modal" => t.self_modal = parse_bool(key, v)?,
            "smooth_l1" => t.smooth_l1 = parse_bool(key, v)?,
            "freeze_teachers" => t.freeze_teachers = parse_bool(key, v)?,
            "stop_gradient" => t.stop_gradient = parse_bool(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "test_mode" => self.test_mode = parse_bool(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(HarnessError::Config)?;
        let t = &self.train;
        let positive = [("lr", t.lr), ("tau", t.tau), ("beta1", t.beta1), ("beta2", t.beta2), ("adam_eps", t.adam_eps)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{k} must be positive")));
            }
        }
        if !(t.beta1 < 1.0 && t.beta2 < 1.0) {
            return Err(HarnessError::Config("Adam betas must be below 1".into()));
        }
        if t.min_lr < 0.0 || t.weight_decay < 0.0 || !(0.0..1.0).contains(&t.drop_path) {
            return Err(HarnessError::Config("min_lr, weight_decay must be >= 0 and drop_path in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return Err(HarnessError::Config("mask_ratio must be in [0, 1)".into()));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.checkpoint_every == 0 {
            return Err(HarnessError::Config("batch_size, epochs and checkpoint_every must be positive".into()));
        }
        if !t.diffusion && !t.contrast_img && !t.contrast_text && !t.self_modal {
            return Err(HarnessError::Config("every objective is disabled".into()));
        }
        let visible = self.model.groups - (t.mask_ratio * self.model.groups as f64).floor() as usize;
        if visible == 0 {
            return Err(HarnessError::Config("mask ratio leaves no visible patch".into()));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |n| n.to_string());
        let widths: Vec<String> = m.dip_widths.iter().map(usize::to_string).collect();
        let mut lines = vec![
            format!("groups = {}", m.groups),
            format!("group_size = {}", m.group_size),
            format!("embed_dim = {}", m.embed_dim),
            format!("depth = {}", m.depth),
            format!("heads = {}", m.heads),
            format!("mlp_ratio = {}", m.mlp_ratio),
            format!("patch_hidden = {}", m.patch_hidden),
            format!("pos_hidden = {}", m.pos_hidden),
            format!("decoder_depth = {}", m.decoder_depth),
            format!("global_pool = {}", m.global_pool),
            format!("feat_dim = {}", m.feat_dim),
            format!("proj_hidden = {}", m.proj_hidden),
            format!("cond_dim = {}", m.cond_dim),
            format!("h2_hidden = {}", m.h2_hidden),
            format!("dip_widths = {}", widths.join(",")),
            format!("dip_knn = {}", m.dip_knn),
            format!("te_dim = {}", m.te_dim),
            format!("dip_gate = {}", m.dip_gate),
            format!("zero_init_modulation = {}", m.zero_init_modulation),
            format!("steps = {}", m.steps),
            format!("beta_start = {:?}", m.beta_start),
            format!("beta_end = {:?}", m.beta_end),
            format!("classes = {}", m.classes),
            format!("templates = {}", m.templates),
            format!("epochs = {}", t.epochs),
            format!("max_steps = {}", opt(t.max_steps)),
            format!("lr = {:?}", t.lr),
            format!("min_lr = {:?}", t.min_lr),
            format!("warmup_epochs = {}", t.warmup_epochs),
            format!("beta1 = {:?}", t.beta1),
            format!("beta2 = {:?}", t.beta2),
            format!("adam_eps = {:?}", t.adam_eps),
            format!("weight_decay = {:?}", t.weight_decay),
            format!("batch_size = {}", t.batch_size),
            format!("drop_path = {:?}", t.drop_path),
            format!("mask_ratio = {:?}", t.mask_ratio),
            format!("tau = {:?}", t.tau),
            format!("seed = {}", t.seed),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("train_limit = {}", opt(t.train_limit)),
            format!("diffusion = {}", t.diffusion),
            format!("contrast_img = {}", t.contrast_img),
            format!("contrast_text = {}", t.contrast_text),
            format!("self_modal = {}", t.self_modal),
            format!("smooth_l1 = {}", t.smooth_l1),
            format!("freeze_teachers = {}", t.freeze_teachers),
            format!("stop_gradient = {}", t.stop_gradient),
            format!("test_mode = {}", self.test_mode),
        ];
        if let Some(d) = &self.data_dir {
            lines.push(format!("data_dir = {}", d.display()));
        }
        lines.join("\n") + "\n"
    }
}

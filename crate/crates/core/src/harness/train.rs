//! Pretraining loop with per-step deterministic randomness.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LOG_FILE, STATE_FILE};
use super::optim::{lr_at, AdamW};
use super::{HarnessError, RunConfig, TrainConfig};
use crate::backbone::{decode_global, decode_global_unbarred, encode_cloud, DropPath};
use crate::condgen::{dip_denoise, h2_condition};
use crate::contrastive::{batch_loss_tape, project_and_normalize, smooth_l1_tape, teacher_image_tape, teacher_text_tape};
use crate::data::{DataError, Dataset, Sample, Split};
use crate::diffusion::{gaussian, make_schedule, q_sample, NoiseSchedule};
use crate::geometry::{build_patches, make_mask};
use crate::model::init_params;
use crate::seeds::derive_seed;
use crate::tensorcore::{Array, Axis, ParamStore, Tape, Var};

pub const CSV_HEADER: &str = "step,L_total,L_dif,L_con,lr,wall_ms";

const ORDER_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

const FPS_START: u64 = 0;
const MASK: u64 = 1;
const DROP: u64 = 2;
const NOISE: u64 = 3;
const SECOND_VIEW: u64 = 4;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_total: f64,
    pub l_dif: f64,
    pub l_con: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Floats use the shortest representation that round-trips.
    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{:?},{:?},{}", self.step, self.l_total, self.l_dif, self.l_con, self.lr, self.wall_ms)
    }
}

/// Losses and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub l_total: f64,
    pub l_dif: f64,
    pub l_con: f64,
    pub grads: BTreeMap<String, Array>,
}

fn global_feature(t: &mut Tape, p: &ParamStore, cfg: &RunConfig, tokens: Var) -> Result<Var, HarnessError> {
    let h = if cfg.train.stop_gradient {
        decode_global(t, p, &cfg.model, tokens)?
    } else {
        decode_global_unbarred(t, p, &cfg.model, tokens)?
    };
    Ok(h)
}

fn alignment(t: &mut Tape, tc: &TrainConfig, z: Var, target: Var) -> Result<Var, HarnessError> {
    if tc.smooth_l1 {
        Ok(smooth_l1_tape(t, z, target)?)
    } else {
        Ok(batch_loss_tape(t, z, target, tc.tau)?)
    }
}

fn sum_terms(t: &mut Tape, terms: &[Var]) -> Result<Option<Var>, HarnessError> {
    let mut acc: Option<Var> = None;
    for &v in terms {
        acc = Some(match acc {
            None => v,
            Some(a) => t.add(a, v)?,
        });
    }
    Ok(acc)
}

/// Forward and backward pass of the full objective on `batch` at `step`.
///
/// Every random draw comes from a stream addressed by `(seed, step, slot)`,
/// so the result depends only on the arguments.
pub fn batch_gradients(
    params: &ParamStore,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    batch: &[&Sample],
    step: usize,
) -> Result<BatchGradients, HarnessError> {
    if batch.is_empty() {
        return Err(HarnessError::Data(DataError::Invalid("empty batch".into())));
    }
    let m = &cfg.model;
    let tc = &cfg.train;
    let mut t = if tc.freeze_teachers { Tape::with_frozen(["teacher."]) } else { Tape::new() };
    let need_global = tc.contrast_img || tc.contrast_text || tc.self_modal;
    let mut dif_terms = Vec::new();
    let mut h_rows = Vec::new();
    let mut h_views = Vec::new();
    for (j, s) in batch.iter().enumerate() {
        let stream = |purpose: u64| derive_seed(tc.seed, &[STEP_STREAM, step as u64, j as u64, purpose]);
        let start = if cfg.test_mode {
            0
        } else {
            ChaCha8Rng::seed_from_u64(stream(FPS_START)).random_range(0..s.points.len())
        };
        let patches = build_patches(&s.points, m.groups, m.group_size, start)?;
        let mask = make_mask(m.groups, tc.mask_ratio, stream(MASK))?;
        let mut drop = DropPath::new(tc.drop_path, stream(DROP));
        let enc = encode_cloud(&mut t, params, m, &patches, &mask, Some(&mut drop))?;
        if tc.diffusion {
            let mut rng = ChaCha8Rng::seed_from_u64(stream(NOISE));
            let diffusion_step = rng.random_range(1..=sched.steps());
            let p0 = s.points.to_array();
            let eps = gaussian(&mut rng, p0.shape());
            let pt = q_sample(&p0, diffusion_step, &eps, sched)?;
            let c = h2_condition(&mut t, params, enc.full)?.c;
            let eps_hat = dip_denoise(&mut t, params, m, &pt, c, diffusion_step)?;
            let target = t.constant(eps)?;
            let d = t.sub(eps_hat, target)?;
            let sq = t.mul(d, d)?;
            dif_terms.push(t.mean(sq)?);
        }
        if need_global {
            h_rows.push(global_feature(&mut t, params, cfg, enc.visible)?);
        }
        if tc.self_modal {
            let view = make_mask(m.groups, tc.mask_ratio, stream(SECOND_VIEW))?;
            let enc2 = encode_cloud(&mut t, params, m, &patches, &view, None)?;
            h_views.push(global_feature(&mut t, params, cfg, enc2.visible)?);
        }
    }

    let l_dif = match dif_terms.len() {
        0 => None,
        _ => {
            let stacked = t.concat(&dif_terms, Axis::Rows)?;
            Some(t.mean(stacked)?)
        }
    };
    let mut con_terms = Vec::new();
    if need_global {
        let h = t.concat(&h_rows, Axis::Rows)?;
        if tc.contrast_img {
            let z = project_and_normalize(&mut t, params, "proj.img", h)?;
            let depths: Vec<&Array> = batch.iter().map(|s| &s.depth).collect();
            let target = teacher_image_tape(&mut t, params, &depths)?;
            con_terms.push(alignment(&mut t, tc, z, target)?);
        }
        if tc.contrast_text {
            let z = project_and_normalize(&mut t, params, "proj.text", h)?;
            let pairs: Vec<(usize, usize)> = batch.iter().map(|s| (s.label, s.template_index)).collect();
            let target = teacher_text_tape(&mut t, params, m, &pairs)?;
            con_terms.push(alignment(&mut t, tc, z, target)?);
        }
        if tc.self_modal {
            let h2 = t.concat(&h_views, Axis::Rows)?;
            let z = project_and_normalize(&mut t, params, "proj.img", h)?;
            let z2 = project_and_normalize(&mut t, params, "proj.img", h2)?;
            con_terms.push(alignment(&mut t, tc, z, z2)?);
        }
    }
    let l_con = sum_terms(&mut t, &con_terms)?;
    let total = sum_terms(&mut t, &[l_dif, l_con].into_iter().flatten().collect::<Vec<_>>())?
        .ok_or_else(|| HarnessError::Config("every objective is disabled".into()))?;

    let value = |v: Option<Var>| v.map_or(0.0, |v| t.scalar(v));
    let (l_total, l_dif, l_con) = (t.scalar(total), value(l_dif), value(l_con));
    if !l_total.is_finite() {
        return Err(HarnessError::Numeric(format!(
            "step {step}: non-finite loss (L_total={l_total}, L_dif={l_dif}, L_con={l_con})"
        )));
    }
    let grads = t.backward(total)?.into_params();
    Ok(BatchGradients { l_total, l_dif, l_con, grads })
}

/// Model, optimizer and position in the step sequence.
pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: usize,
    /// CSV rows of every step run so far.
    pub log: Vec<String>,
    samples: Vec<Sample>,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(cfg: RunConfig, samples: Vec<Sample>) -> Result<Self, HarnessError> {
        let params = init_params(&cfg.model, cfg.train.seed);
        let tc = &cfg.train;
        let opt = AdamW::new(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
        Self::assemble(Checkpoint { config: cfg, params, opt, step: 0, log: Vec::new() }, samples)
    }

    pub fn from_checkpoint(ck: Checkpoint, samples: Vec<Sample>) -> Result<Self, HarnessError> {
        Self::assemble(ck, samples)
    }

    fn assemble(ck: Checkpoint, mut samples: Vec<Sample>) -> Result<Self, HarnessError> {
        ck.config.validate()?;
        if let Some(n) = ck.config.train.train_limit {
            samples.truncate(n);
        }
        if samples.is_empty() {
            return Err(HarnessError::Data(DataError::Invalid("no training samples".into())));
        }
        let m = &ck.config.model;
        let sched = make_schedule(m.steps, m.beta_start, m.beta_end)?;
        Ok(Self { cfg: ck.config, params: ck.params, opt: ck.opt, step: ck.step, log: ck.log, samples, sched })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.train.max_steps.unwrap_or(self.cfg.train.epochs * self.steps_per_epoch())
    }

    pub fn lr(&self, step: usize) -> f64 {
        let tc = &self.cfg.train;
        lr_at(step, self.total_steps(), tc.warmup_epochs * self.steps_per_epoch(), tc.lr, tc.min_lr)
    }

    /// Sample indices of the batch at `step`: a fresh permutation per epoch.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.train.seed, &[ORDER_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        let bs = self.cfg.train.batch_size;
        order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec()
    }

    /// Runs one optimizer step and appends its log row.
    pub fn step_once(&mut self) -> Result<StepRecord, HarnessError> {
        let clock = Instant::now();
        let step = self.step;
        let batch: Vec<&Sample> = self.batch_indices(step).into_iter().map(|i| &self.samples[i]).collect();
        let out = batch_gradients(&self.params, &self.cfg, &self.sched, &batch, step).map_err(|e| match e {
            HarnessError::Numeric(msg) if !msg.starts_with("step ") => HarnessError::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;
        let lr = self.lr(step);
        self.opt.step(&mut self.params, &out.grads, lr);
        self.step += 1;
        let wall_ms = if self.cfg.test_mode { 0 } else { clock.elapsed().as_millis() as u64 };
        let rec = StepRecord { step, l_total: out.l_total, l_dif: out.l_dif, l_con: out.l_con, lr, wall_ms };
        self.log.push(rec.csv_row());
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            step: self.step,
            log: self.log.clone(),
        }
    }
}

fn load_train_split(cfg: &RunConfig) -> Result<Vec<Sample>, HarnessError> {
    let dir = cfg.data_dir.as_ref().ok_or_else(|| HarnessError::Config("`data_dir` is not set".into()))?;
    Ok(Dataset::open(dir)?.load_split(Split::Train)?)
}

/// Trains into `out`, writing `log.csv` as it goes and a checkpoint every
/// `checkpoint_every` epochs and at the end. With `resume`, continues from
/// the checkpoint in `out` using its stored configuration. `until` stops
/// early at that step without changing the schedule.
pub fn pretrain_run(cfg: &RunConfig, out: &Path, resume: bool, until: Option<usize>) -> Result<Trainer, HarnessError> {
    let mut trainer = if resume && out.join(STATE_FILE).exists() {
        let ck = load_checkpoint(out)?;
        let samples = load_train_split(&ck.config)?;
        Trainer::from_checkpoint(ck, samples)?
    } else {
        let samples = load_train_split(cfg)?;
        let trainer = Trainer::new(cfg.clone(), samples)?;
        fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
        save_checkpoint(out, &trainer.checkpoint())?;
        trainer
    };
    let log_path = out.join(LOG_FILE);
    let mut log =
        OpenOptions::new().append(true).open(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
    let end = until.map_or(trainer.total_steps(), |u| u.min(trainer.total_steps()));
    let spe = trainer.steps_per_epoch();
    while trainer.step < end {
        let rec = trainer.step_once()?;
        writeln!(log, "{}", rec.csv_row()).map_err(|e| HarnessError::io(&log_path, e))?;
        let epoch_done = trainer.step % spe == 0 && (trainer.step / spe) % trainer.cfg.train.checkpoint_every == 0;
        if epoch_done {
            save_checkpoint(out, &trainer.checkpoint())?;
        }
    }
    save_checkpoint(out, &trainer.checkpoint())?;
    Ok(trainer)
}

//! Cross-modal distillation: frozen toy image and text teachers, projection
//! heads, and the in-batch contrastive loss.
//!
//! Teacher tensors live under `teacher.` so a tape built with
//! `Tape::with_frozen(["teacher."])` treats them as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{CLASS_NAMES, DEPTH_RES, DEPTH_SENTINEL, TEMPLATES};
use crate::model::ModelConfig;
use crate::nn::{self, Init};
use crate::tensorcore::{Array, Axis, ParamStore, Tape, TensorError, Var};

pub const IMAGE_TEACHER: &str = "teacher.img.w";
pub const TEXT_TEACHER: &str = "teacher.text.table";
const IMAGE_TEACHER_SEED: u64 = 0x1ea7_f00d;
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("unknown label {0}")]
    UnknownLabel(usize),
    #[error("unknown template {0}")]
    UnknownTemplate(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn init_heads(init: &mut Init<'_>, cfg: &ModelConfig) {
    for head in ["proj.img", "proj.text"] {
        init.mlp(head, cfg.feat_dim, cfg.proj_hidden, cfg.feat_dim, false);
    }
}

/// Frozen random linear map from a flattened depth map to `D` dims. Seeded
/// by a build constant, so every model shares the same teacher.
pub fn init_image_teacher(init: &mut Init<'_>, cfg: &ModelConfig) {
    let pixels = DEPTH_RES * DEPTH_RES;
    let mut rng = ChaCha8Rng::seed_from_u64(IMAGE_TEACHER_SEED);
    let dist = Normal::new(0.0, (1.0 / pixels as f64).sqrt()).expect("positive std");
    let data = (0..pixels * cfg.feat_dim).map(|_| dist.sample(&mut rng)).collect();
    init.insert(IMAGE_TEACHER, Array::matrix(pixels, cfg.feat_dim, data).expect("finite"));
}

fn text_vector(template: &str, label: &str, attempt: u32, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(template.as_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    h.update(attempt.to_le_bytes());
    let digest = h.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| Normal::new(0.0, 1.0).expect("unit").sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Table `[classes * templates, D]` of unit text features; row
/// `label * templates + template`. A vector whose cosine with any other
/// label's vector reaches 0.5 is redrawn; after `MAX_REDRAWS` attempts the
/// draw with the smallest worst-case cosine is kept (only reachable at tiny
/// `D`).
pub fn init_text_teacher(store: &mut ParamStore, cfg: &ModelConfig) {
    const MAX_REDRAWS: u32 = 256;
    let (classes, templates, dim) = (cfg.classes, cfg.templates, cfg.feat_dim);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes * templates);
    for label in 0..classes {
        for template in 0..templates {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for attempt in 0..MAX_REDRAWS {
                let v = text_vector(TEMPLATES[template], CLASS_NAMES[label], attempt, dim);
                let worst = rows
                    .iter()
                    .enumerate()
                    .filter(|(r, _)| r / templates != label)
                    .map(|(_, w)| cosine(&v, w).abs())
                    .fold(0.0, f64::max);
                if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                    best = Some((worst, v));
                }
                if worst < 0.5 {
                    break;
                }
            }
            rows.push(best.expect("at least one draw").1);
        }
    }
    let data = rows.into_iter().flatten().collect();
    store.insert(TEXT_TEACHER, Array::matrix(classes * templates, dim, data).expect("finite"));
}

/// Teacher features for a batch of depth maps (`[B, R*R]` after the
/// sentinel shift), unit-normalized.
pub fn teacher_image_tape(t: &mut Tape, p: &ParamStore, depths: &[&Array]) -> Result<Var, TensorError> {
    let pixels = DEPTH_RES * DEPTH_RES;
    let mut data = Vec::with_capacity(depths.len() * pixels);
    for d in depths {
        if d.len() != pixels {
            return Err(TensorError::InvalidArray(format!("depth map has {} cells, expected {pixels}", d.len())));
        }
        data.extend(d.data().iter().map(|v| v - DEPTH_SENTINEL));
    }
    let x = t.constant(Array::matrix(depths.len(), pixels, data)?)?;
    let w = t.param(p, IMAGE_TEACHER)?;
    let y = t.matmul(x, w)?;
    t.normalize_rows(y)
}

pub fn teacher_image_feature(p: &ParamStore, depth: &Array) -> Result<Array, ContrastiveError> {
    let mut t = Tape::new();
    let v = teacher_image_tape(&mut t, p, &[depth])?;
    Ok(t.value(v).clone())
}

fn text_row(cfg: &ModelConfig, label: usize, template: usize) -> Result<usize, ContrastiveError> {
    if label >= cfg.classes {
        return Err(ContrastiveError::UnknownLabel(label));
    }
    if template >= cfg.templates {
        return Err(ContrastiveError::UnknownTemplate(template));
    }
    Ok(label * cfg.templates + template)
}

/// Text features for `(label, template)` pairs, unit-normalized.
pub fn teacher_text_tape(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    pairs: &[(usize, usize)],
) -> Result<Var, ContrastiveError> {
    let rows = pairs.iter().map(|&(l, k)| text_row(cfg, l, k)).collect::<Result<Vec<_>, _>>()?;
    let table = t.param(p, TEXT_TEACHER)?;
    let g = t.gather(table, &rows)?;
    Ok(t.normalize_rows(g)?)
}

pub fn teacher_text_feature(p: &ParamStore, cfg: &ModelConfig, label: usize, template: usize) -> Result<Array, ContrastiveError> {
    let mut t = Tape::new();
    let v = teacher_text_tape(&mut t, p, cfg, &[(label, template)])?;
    Ok(t.value(v).clone())
}

/// Mean of the per-template features, renormalized.
pub fn text_ensemble(p: &ParamStore, cfg: &ModelConfig, label: usize, templates: &[usize]) -> Result<Array, ContrastiveError> {
    let mut t = Tape::new();
    let pairs: Vec<_> = templates.iter().map(|&k| (label, k)).collect();
    let v = teacher_text_tape(&mut t, p, cfg, &pairs)?;
    let m = t.mean_rows(v)?;
    let n = t.normalize_rows(m)?;
    Ok(t.value(n).clone())
}

/// Two-layer head then L2 normalization of every row.
pub fn project_and_normalize(t: &mut Tape, p: &ParamStore, head: &str, h: Var) -> Result<Var, TensorError> {
    let z = nn::mlp(t, p, head, h)?;
    t.normalize_rows(z)
}

fn check_tau(tau: f64) -> Result<(), ContrastiveError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ContrastiveError::Temperature(tau));
    }
    Ok(())
}

/// Per-row loss `[N, 1]` of rows of `z` against positives in `h`, with the
/// other rows of `z` and all rows of `h` as the denominator.
fn directional_losses(t: &mut Tape, z: Var, h: Var, tau: f64) -> Result<Var, TensorError> {
    let n = t.shape(z).0;
    let zz = t.matmul_t(z, false, z, true)?;
    let zz = t.scale(zz, 1.0 / tau)?;
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = MASKED_LOGIT;
    }
    let mask = t.constant(Array::matrix(n, n, mask)?)?;
    let zz = t.add(zz, mask)?;
    let zh = t.matmul_t(z, false, h, true)?;
    let zh = t.scale(zh, 1.0 / tau)?;
    let logits = t.concat(&[zz, zh], Axis::Cols)?;
    let lse = t.logsumexp_rows(logits)?;
    // Diagonal of the same logits, so the positive cancels exactly.
    let eye = t.constant(Array::eye(n))?;
    let diag = t.mul(zh, eye)?;
    let pos = t.row_sum(diag)?;
    t.sub(lse, pos)
}

/// Symmetric in-batch loss `(1/2N) sum_i [l(i, z, h) + l(i, h, z)]` on the tape.
pub fn batch_loss_tape(t: &mut Tape, z: Var, h: Var, tau: f64) -> Result<Var, ContrastiveError> {
    check_tau(tau)?;
    if t.shape(z) != t.shape(h) {
        return Err(ContrastiveError::Shape(format!("{:?} vs {:?}", t.shape(z), t.shape(h))));
    }
    let a = directional_losses(t, z, h, tau)?;
    let b = directional_losses(t, h, z, tau)?;
    let both = t.add(a, b)?;
    let s = t.sum(both)?;
    let n = t.shape(z).0 as f64;
    Ok(t.scale(s, 1.0 / (2.0 * n))?)
}

pub fn batch_loss(z: &Array, h: &Array, tau: f64) -> Result<f64, ContrastiveError> {
    let mut t = Tape::new();
    let zv = t.constant(z.clone())?;
    let hv = t.constant(h.clone())?;
    let l = batch_loss_tape(&mut t, zv, hv, tau)?;
    Ok(t.scalar(l))
}

/// Loss of row `i` (0-based) of `z` with positive `h[i]`.
pub fn pair_loss(i: usize, z: &Array, h: &Array, tau: f64) -> Result<f64, ContrastiveError> {
    check_tau(tau)?;
    if z.shape() != h.shape() || i >= z.rows() {
        return Err(ContrastiveError::Shape(format!("row {i} of {:?} vs {:?}", z.shape(), h.shape())));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let zi = z.row(i);
    let mut logits: Vec<f64> = (0..z.rows()).filter(|&k| k != i).map(|k| dot(zi, z.row(k)) / tau).collect();
    logits.extend((0..h.rows()).map(|k| dot(zi, h.row(k)) / tau));
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - dot(zi, h.row(i)) / tau)
}

/// `(L_total, L_con)` with `L_con = batch(z_pc, z_img) + batch(z_pc, z_text)`.
pub fn total_objective(l_dif: f64, z_pc: &Array, z_img: &Array, z_text: &Array, tau: f64) -> Result<(f64, f64), ContrastiveError> {
    let l_con = batch_loss(z_pc, z_img, tau)? + batch_loss(z_pc, z_text, tau)?;
    Ok((l_dif + l_con, l_con))
}

/// Elementwise smooth-L1 distance averaged over entries.
pub fn smooth_l1_tape(t: &mut Tape, z: Var, target: Var) -> Result<Var, TensorError> {
    let d = t.sub(z, target)?;
    let s = t.smooth_l1(d)?;
    t.mean(s)
}

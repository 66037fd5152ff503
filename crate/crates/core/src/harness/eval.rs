//! Frozen-model evaluation: linear probe, zero-shot classification and
//! conditional denoising export.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, RunConfig};
use crate::backbone::{decode_global, encode_cloud};
use crate::condgen::{dip_denoise, h2_condition};
use crate::contrastive::{project_and_normalize, text_ensemble};
use crate::data::{export_ply, DataError, Sample};
use crate::diffusion::{gaussian, make_schedule, sample_loop, DiffusionError};
use crate::geometry::{build_patches, chamfer, make_mask, MaskPlan, PointCloud};
use crate::model::ModelConfig;
use crate::seeds::derive_seed;
use crate::tensorcore::{Array, ParamStore, Tape};

const EXPORT_STREAM: u64 = 3;

/// Global features `[N, D]` of unmasked clouds.
pub fn global_features(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<Array, HarnessError> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let mut t = Tape::new();
        let patches = build_patches(&s.points, cfg.groups, cfg.group_size, 0)?;
        let enc = encode_cloud(&mut t, params, cfg, &patches, &MaskPlan::none(cfg.groups), None)?;
        let h = decode_global(&mut t, params, cfg, enc.full)?;
        rows.push(t.value(h).data().to_vec());
    }
    Ok(Array::from_rows(&rows)?)
}

/// Top-1 accuracy of cosine scoring between projected point features and
/// class text features averaged over `templates`.
pub fn zeroshot_classify(
    params: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    templates: &[usize],
) -> Result<f64, HarnessError> {
    if samples.is_empty() || templates.is_empty() {
        return Err(HarnessError::Data(DataError::Invalid("zero-shot needs samples and templates".into())));
    }
    let classes = (0..cfg.classes).map(|l| text_ensemble(params, cfg, l, templates)).collect::<Result<Vec<_>, _>>()?;
    let h = global_features(params, cfg, samples)?;
    let mut t = Tape::new();
    let hv = t.constant(h)?;
    let z = project_and_normalize(&mut t, params, "proj.text", hv)?;
    let z = t.value(z);
    let mut correct = 0;
    for (i, s) in samples.iter().enumerate() {
        let scores = classes.iter().map(|c| z.row(i).iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>());
        let best = argmax(scores);
        correct += usize::from(best == s.label);
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub l2: f64,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { l2: 1e-4, tol: 1e-6, max_iter: 1000 }
    }
}

/// Softmax regression on standardized features; returns `(loss, grad)` for
/// weights laid out `[(d + 1) * k]` with the bias as the last row.
struct Softmax<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    l2: f64,
}

impl Softmax<'_> {
    fn logits(w: &[f64], x: &[f64], k: usize) -> Vec<f64> {
        let d = x.len();
        (0..k).map(|c| w[d * k + c] + x.iter().enumerate().map(|(j, v)| v * w[j * k + c]).sum::<f64>()).collect()
    }

    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let k = self.k;
        let d = self.x[0].len();
        let n = self.x.len() as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; w.len()];
        for (x, &y) in self.x.iter().zip(self.y) {
            let z = Self::logits(w, x, k);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            loss += m + s.ln() - z[y];
            for c in 0..k {
                let r = ((z[c] - m).exp() / s - f64::from(u8::from(c == y))) / n;
                for (j, v) in x.iter().enumerate() {
                    g[j * k + c] += r * v;
                }
                g[d * k + c] += r;
            }
        }
        loss /= n;
        for i in 0..d * k {
            loss += 0.5 * self.l2 * w[i] * w[i];
            g[i] += self.l2 * w[i];
        }
        (loss, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with backtracking Armijo steps.
fn lbfgs(f: impl Fn(&[f64]) -> (f64, Vec<f64>), mut w: Vec<f64>, opts: &ProbeOptions) -> Vec<f64> {
    const MEMORY: usize = 10;
    let (mut fx, mut g) = f(&w);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..opts.max_iter {
        if dot(&g, &g).sqrt() < opts.tol {
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            hist.clear();
        }
        let mut step = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(wi, di)| wi + step * di).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * step * slope {
                break Some((cand, fc, gc));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else { break };
        let s: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        w = cand;
        fx = fc;
        g = gc;
    }
    w
}

/// Held-out accuracy of a multinomial logistic regression fitted on
/// standardized training features.
pub fn linear_probe(
    train_x: &Array,
    train_y: &[usize],
    test_x: &Array,
    test_y: &[usize],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<f64, HarnessError> {
    let invalid = |m: String| HarnessError::Data(DataError::Invalid(m));
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(invalid("probe feature and label counts disagree".into()));
    }
    if test_y.is_empty() {
        return Err(invalid("empty test split".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(invalid(format!("label {bad} outside {classes} classes")));
    }
    let present: BTreeSet<usize> = train_y.iter().copied().collect();
    if let Some(missing) = (0..classes).find(|c| !present.contains(c)) {
        return Err(invalid(format!("class {missing} absent from the training split")));
    }
    let d = train_x.cols();
    let n = train_x.rows() as f64;
    let mean: Vec<f64> = (0..d).map(|j| (0..train_x.rows()).map(|i| train_x.at(i, j)).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..train_x.rows()).map(|i| (train_x.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize =
        |a: &Array| -> Vec<Vec<f64>> { (0..a.rows()).map(|i| (0..d).map(|j| (a.at(i, j) - mean[j]) / std[j]).collect()).collect() };
    let xs = standardize(train_x);
    let model = Softmax { x: &xs, y: train_y, k: classes, l2: opts.l2 };
    let w = lbfgs(|w| model.eval(w), vec![0.0; (d + 1) * classes], opts);
    let correct = standardize(test_x)
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| argmax(Softmax::logits(&w, x, classes).into_iter()) == y)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[derive(Clone, Debug)]
pub struct DenoiseReport {
    /// Chamfer distance of the generated cloud to the input.
    pub chamfer: f64,
    /// Chamfer distance of a standard Gaussian cloud to the input.
    pub baseline_chamfer: f64,
    pub files: Vec<PathBuf>,
}

/// Conditions on a masked copy of `sample`, runs the reverse chain and
/// writes `input.ply`, `masked.ply`, `traj_XXXX.ply` and `final.ply`.
pub fn denoise_export(
    params: &ParamStore,
    cfg: &RunConfig,
    sample: &Sample,
    out: &Path,
    every: usize,
    seed: u64,
) -> Result<DenoiseReport, HarnessError> {
    let m = &cfg.model;
    let sched = make_schedule(m.steps, m.beta_start, m.beta_end)?;
    let patches = build_patches(&sample.points, m.groups, m.group_size, 0)?;
    let mask = make_mask(m.groups, cfg.train.mask_ratio, derive_seed(seed, &[EXPORT_STREAM, 0]))?;
    let mut kept: Vec<usize> =
        mask.visible_indices().into_iter().flat_map(|i| patches.member_indices[i].iter().copied()).collect();
    kept.sort_unstable();
    kept.dedup();
    let masked = PointCloud::new(kept.iter().map(|&i| sample.points.points()[i]).collect())?;

    let c = {
        let mut t = Tape::new();
        let enc = encode_cloud(&mut t, params, m, &patches, &mask, None)?;
        let c = h2_condition(&mut t, params, enc.full)?.c;
        t.value(c).clone()
    };
    let denoiser = |x: &Array, c: &Array, step: usize| -> Result<Array, DiffusionError> {
        let mut t = Tape::new();
        let cv = t.constant(c.clone())?;
        let e = dip_denoise(&mut t, params, m, x, cv, step)?;
        Ok(t.value(e).clone())
    };
    let n = sample.points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EXPORT_STREAM, 1]));
    let (final_x, trajectory) = sample_loop(denoiser, &c, n, &sched, every, &mut rng)?;
    let generated = PointCloud::from_array(&final_x)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EXPORT_STREAM, 2]));
    let noise = PointCloud::from_array(&gaussian(&mut rng, &[n, 3]))?;

    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut files = Vec::new();
    let mut write = |name: String, pc: &PointCloud| -> Result<(), HarnessError> {
        let path = out.join(name);
        export_ply(pc, &path)?;
        files.push(path);
        Ok(())
    };
    write("input.ply".into(), &sample.points)?;
    write("masked.ply".into(), &masked)?;
    for (i, x) in trajectory.iter().enumerate() {
        write(format!("traj_{i:04}.ply"), &PointCloud::from_array(x)?)?;
    }
    write("final.ply".into(), &generated)?;
    Ok(DenoiseReport { chamfer: chamfer(&generated, &sample.points), baseline_chamfer: chamfer(&noise, &sample.points), files })
}

//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::tensorcore::{Array, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

/// Decay applies to weight matrices only, not biases, norms or tokens.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * pd[i]);
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to `min_lr` at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut p = ParamStore::new();
        p.insert("a.w", Array::full(&[2, 2], 0.7));
        p.insert("a.b", Array::full(&[1, 2], -0.3));
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("a.w".to_string(), Array::full(&[2, 2], 1.0));
        g.insert("a.b".to_string(), Array::full(&[1, 2], 1.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.05);
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("x.w", Array::scalar(1.0));
        p.insert("x.b", Array::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("x.w".to_string(), Array::scalar(0.5));
        g.insert("x.b".to_string(), Array::scalar(0.5));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut p, &g, 0.01);
        // Bias-corrected first step moves by lr * sign(g) (up to eps).
        let adam = 0.5 / (0.5 + 1e-8);
        assert!((p.get("x.b").unwrap().item() - (1.0 - 0.01 * adam)).abs() < 1e-15);
        assert!((p.get("x.w").unwrap().item() - (1.0 - 0.01 * (adam + 0.1))).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, 100, 10, 1.0, 0.0)).collect();
        assert!((lrs[0] - 0.1).abs() < 1e-12);
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] < 0.01);
        assert_eq!(lr_at(5, 10, 0, 2.0, 0.0), 1.0);
    }
}

//! Gaussian diffusion over point coordinates.
//!
//! Clouds and noise are `[n, 3]` arrays. Step indices are 1-based: `t = 1`
//! is the last reverse step, `t = T` the noisiest state.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensorcore::{Array, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {t} outside [1, {max}]")]
    Step { t: usize, max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("variance must be positive, got {0}")]
    Variance(f64),
    #[error("denoiser at step {t}: {detail}")]
    Denoiser { t: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    b: Vec<f64>,
    a: Vec<f64>,
    abar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.b.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.b[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.a[t - 1]
    }

    /// Cumulative product up to `t`; `abar(0) == 1`.
    pub fn abar(&self, t: usize) -> f64 {
        self.abar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.b
    }

    pub fn abars(&self) -> &[f64] {
        &self.abar
    }

    /// Posterior variance `b_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.abar(t - 1)) / (1.0 - self.abar(t))
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { t, max: self.steps() });
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, b_start: f64, b_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(b_start > 0.0 && b_start <= b_end && b_end < 1.0) {
        return Err(DiffusionError::Schedule(format!("need 0 < {b_start} <= {b_end} < 1")));
    }
    let b: Vec<f64> = if steps == 1 {
        vec![b_start]
    } else {
        (0..steps).map(|i| b_start + (b_end - b_start) * i as f64 / (steps - 1) as f64).collect()
    };
    let a: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
    let mut abar = Vec::with_capacity(steps + 1);
    abar.push(1.0);
    for &ai in &a {
        abar.push(abar.last().copied().unwrap_or(1.0) * ai);
    }
    Ok(NoiseSchedule { b, a, abar })
}

fn same_shape(x: &Array, y: &Array) -> Result<(), DiffusionError> {
    if x.shape() != y.shape() {
        return Err(DiffusionError::Shape(x.shape().to_vec(), y.shape().to_vec()));
    }
    Ok(())
}

fn lincomb(x: &Array, cx: f64, y: &Array, cy: f64) -> Result<Array, DiffusionError> {
    let data = x.data().iter().zip(y.data()).map(|(u, v)| cx * u + cy * v).collect();
    Ok(Array::new(x.shape().to_vec(), data)?)
}

/// Standard-normal array of the given shape.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Array {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(shape.to_vec(), data).expect("gaussian draws are finite")
}

/// `sqrt(abar_t) p0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(p0: &Array, t: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array, DiffusionError> {
    sched.check_step(t)?;
    same_shape(p0, eps)?;
    let ab = sched.abar(t);
    lincomb(p0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Inverts [`q_sample`] for a given noise estimate.
pub fn predict_x0(pt: &Array, eps_hat: &Array, t: usize, sched: &NoiseSchedule) -> Result<Array, DiffusionError> {
    sched.check_step(t)?;
    same_shape(pt, eps_hat)?;
    let ab = sched.abar(t);
    let s = ab.sqrt();
    lincomb(pt, 1.0 / s, eps_hat, -(1.0 - ab).sqrt() / s)
}

/// Mean and variance of the reverse step `t -> t-1` given a noise estimate.
pub fn posterior_stats(
    pt: &Array,
    eps_hat: &Array,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Array, f64), DiffusionError> {
    sched.check_step(t)?;
    same_shape(pt, eps_hat)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.abar(t)).sqrt();
    let mean = lincomb(pt, inv, eps_hat, -inv * coef)?;
    Ok((mean, sched.posterior_variance(t)))
}

/// One ancestral step; deterministic at `t == 1`.
pub fn p_sample<R: Rng + ?Sized>(
    pt: &Array,
    eps_hat: &Array,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array, DiffusionError> {
    let (mean, var) = posterior_stats(pt, eps_hat, t, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = gaussian(rng, mean.shape());
    lincomb(&mean, 1.0, &z, var.sqrt())
}

/// Runs the reverse chain from `P^T ~ N(0, I)`.
///
/// The trajectory holds `P^T` followed by the state after every `every`-th
/// step, so its length is `floor(T / every) + 1`.
pub fn sample_loop<R, F>(
    mut denoiser: F,
    c: &Array,
    n: usize,
    sched: &NoiseSchedule,
    every: usize,
    rng: &mut R,
) -> Result<(Array, Vec<Array>), DiffusionError>
where
    R: Rng + ?Sized,
    F: FnMut(&Array, &Array, usize) -> Result<Array, DiffusionError>,
{
    if every == 0 {
        return Err(DiffusionError::Schedule("trajectory stride must be positive".into()));
    }
    let steps = sched.steps();
    let mut x = gaussian(rng, &[n, 3]);
    let mut trajectory = vec![x.clone()];
    for (done, t) in (1..=steps).rev().enumerate() {
        let eps_hat = denoiser(&x, c, t)?;
        if eps_hat.shape() != [n, 3] {
            return Err(DiffusionError::Denoiser { t, detail: format!("returned shape {:?}", eps_hat.shape()) });
        }
        if !eps_hat.is_finite() {
            return Err(DiffusionError::Denoiser { t, detail: "returned non-finite values".into() });
        }
        x = p_sample(&x, &eps_hat, t, sched, rng)?;
        if (done + 1) % every == 0 {
            trajectory.push(x.clone());
        }
    }
    Ok((x, trajectory))
}

/// Mean squared error over every scalar entry.
pub fn diffusion_loss(eps: &Array, eps_hat: &Array) -> Result<f64, DiffusionError> {
    same_shape(eps, eps_hat)?;
    let sum: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// KL(q || p) between isotropic Gaussians, summed over all dimensions.
pub fn kl_diag_gaussians(mean_q: &Array, var_q: f64, mean_p: &Array, var_p: f64) -> Result<f64, DiffusionError> {
    for v in [var_q, var_p] {
        if !(v > 0.0) {
            return Err(DiffusionError::Variance(v));
        }
    }
    same_shape(mean_q, mean_p)?;
    let per_dim = 0.5 * ((var_p / var_q).ln() + var_q / var_p - 1.0);
    let quad: f64 = mean_q.data().iter().zip(mean_p.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(per_dim * mean_q.len() as f64 + 0.5 * quad / var_p)
}

//! DDPM machinery: noise schedules, forward noising, the ε-prediction
//! objective and the conditional ancestral sampler.
//!
//! Diffusion steps are 1-based throughout: `t = 1` is the least noisy step
//! and `t = T` the noisiest. Schedule arrays are stored 0-based, so step `t`
//! lives at index `t - 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field2D;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {}",
                beta.len()
            )));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    let span = beta_end - beta_start;
    let last = (steps - 1) as f64;
    NoiseSchedule::from_betas(
        (0..steps)
            .map(|i| beta_start + span * i as f64 / last)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Dataset statistics used to standardize wind and terrain channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub wind_mean: f64,
    pub wind_std: f64,
    pub terrain_mean: f64,
    pub terrain_std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        wind_mean: 0.0,
        wind_std: 1.0,
        terrain_mean: 0.0,
        terrain_std: 1.0,
    };

    /// Pooled mean/std over each group of fields. Zero spread maps to 1.
    pub fn fit<'a>(
        wind: impl IntoIterator<Item = &'a Field2D>,
        terrain: impl IntoIterator<Item = &'a Field2D>,
    ) -> Self {
        fn pooled<'a>(fields: impl IntoIterator<Item = &'a Field2D>) -> (f64, f64) {
            let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
            for f in fields {
                n += f.len();
                for v in f.values() {
                    s += v;
                    s2 += v * v;
                }
            }
            if n == 0 {
                return (0.0, 1.0);
            }
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        }
        let (wind_mean, wind_std) = pooled(wind);
        let (terrain_mean, terrain_std) = pooled(terrain);
        Self {
            wind_mean,
            wind_std,
            terrain_mean,
            terrain_std,
        }
    }

    pub fn normalize_wind(&self, f: &Field2D) -> Field2D {
        f.map(|v| (v - self.wind_mean) / self.wind_std)
            .expect("affine map of finite field")
    }

    pub fn denormalize_wind(&self, f: &Field2D) -> Field2D {
        f.map(|v| v * self.wind_std + self.wind_mean)
            .expect("affine map of finite field")
    }

    pub fn normalize_terrain(&self, f: &Field2D) -> Field2D {
        f.map(|v| (v - self.terrain_mean) / self.terrain_std)
            .expect("affine map of finite field")
    }
}

/// Normalized conditioning channels on the high-resolution grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub lr_upsampled: Field2D,
    pub terrain: Field2D,
}

impl Conditioning {
    /// Wraps already-normalized channels.
    pub fn new(lr_upsampled: Field2D, terrain: Field2D) -> Result<Self> {
        lr_upsampled.ensure_same_shape(&terrain)?;
        Ok(Self {
            lr_upsampled,
            terrain,
        })
    }

    /// Normalizes a physical upsampled wind field (m/s) and terrain (m).
    pub fn from_physical(lr_upsampled_mps: &Field2D, terrain_m: &Field2D, stats: &NormStats) -> Result<Self> {
        Self::new(
            stats.normalize_wind(lr_upsampled_mps),
            stats.normalize_terrain(terrain_m),
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lr_upsampled.shape()
    }
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Field2D, cond: &Conditioning, t: usize) -> Result<Field2D>;

    /// Statistics for mapping samples back to physical units.
    fn norm_stats(&self) -> NormStats;
}

/// Closed-form marginal `q(x_t | x_0)` with injected noise.
pub fn forward_sample(x0: &Field2D, t: usize, eps: &Field2D, sched: &NoiseSchedule) -> Result<Field2D> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| signal * x + noise * e)
}

/// Applies `x_s = √(1-β_s)·x_{s-1} + √β_s·ε_s` for `s = 1..=noises.len()`.
pub fn iterated_forward_with(x0: &Field2D, noises: &[Field2D], sched: &NoiseSchedule) -> Result<Field2D> {
    sched.check_step(noises.len())?;
    let mut x = x0.clone();
    for (i, eps) in noises.iter().enumerate() {
        let beta = sched.beta(i + 1);
        let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
        x = x.zip_map(eps, |v, e| keep * v + add * e)?;
    }
    Ok(x)
}

/// Step-by-step forward chain drawing each `ε_s` from `rng`.
pub fn iterated_forward<R: Rng + ?Sized>(
    x0: &Field2D,
    t: usize,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<Field2D> {
    sched.check_step(t)?;
    let mut x = x0.values().to_vec();
    for s in 1..=t {
        let beta = sched.beta(s);
        let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
        for v in &mut x {
            let e: f64 = rng.sample(StandardNormal);
            *v = keep * *v + add * e;
        }
    }
    x0.with_values(x)
}

pub fn standard_normal_field<R: Rng + ?Sized>(like: &Field2D, rng: &mut R) -> Field2D {
    like.with_values((0..like.len()).map(|_| rng.sample(StandardNormal)).collect())
        .expect("normal draws are finite")
}

/// `‖ε − ε_θ(x_t, t)‖²` averaged over pixels, with `x_t` from [`forward_sample`].
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Field2D,
    cond: &Conditioning,
    t: usize,
    eps: &Field2D,
    sched: &NoiseSchedule,
) -> Result<f64> {
    x0.ensure_same_shape(&cond.lr_upsampled)?;
    let xt = forward_sample(x0, t, eps, sched)?;
    let pred = model.predict_noise(&xt, cond, t)?;
    pred.ensure_same_shape(eps)?;
    Ok(pred
        .values()
        .iter()
        .zip(eps.values())
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        / eps.len() as f64)
}

/// One ancestral step `x_t → x_{t-1}`. `z` is ignored at `t = 1`.
pub fn reverse_step<M: NoisePredictor + ?Sized>(
    model: &M,
    xt: &Field2D,
    t: usize,
    cond: &Conditioning,
    z: &Field2D,
    sched: &NoiseSchedule,
) -> Result<Field2D> {
    sched.check_step(t)?;
    xt.ensure_same_shape(&cond.lr_upsampled)?;
    xt.ensure_same_shape(z)?;
    let eps = model.predict_noise(xt, cond, t)?;
    xt.ensure_same_shape(&eps)?;
    Ok(reverse_update(xt.values(), eps.values(), z.values(), t, sched, xt))
}

fn reverse_update(xt: &[f64], eps: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule, like: &Field2D) -> Field2D {
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t > 1 { sched.posterior_var(t).sqrt() } else { 0.0 };
    let values = xt
        .iter()
        .zip(eps)
        .zip(z)
        .map(|((x, e), n)| (x - coef * e) * inv_sqrt_alpha + sigma * n)
        .collect();
    like.with_values(values).expect("finite reverse update")
}

/// Full reverse chain in normalized units, starting from `x_T ~ N(0, I)`.
pub fn sample_normalized<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Field2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal_field(&cond.lr_upsampled, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(&x, cond, t)?;
        x.ensure_same_shape(&eps)?;
        let z: Vec<f64> = if t > 1 {
            (0..x.len()).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; x.len()]
        };
        x = reverse_update(x.values(), eps.values(), &z, t, sched, &x);
    }
    Ok(x)
}

/// Conditional sample in physical units (m/s), clamped at zero.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Field2D> {
    let x = sample_normalized(model, cond, sched, seed)?;
    let stats = model.norm_stats();
    Ok(stats.denormalize_wind(&x).map(|v| v.max(0.0))?)
}

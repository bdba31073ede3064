//! Forward corruption, ε-prediction objective and ancestral sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParameterSet;
use crate::pruning::MaskSet;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Variance schedule `β_1..β_T` with `α_t = 1 - β_t` and `ᾱ_t = Π_{s<=t} α_s`.
/// Timesteps are 1-based throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl DiffusionConfig {
    /// DDPM's 1000-step linear endpoints (1e-4, 0.02) rescaled by `1000 / T`.
    pub fn rescaled(timesteps: usize) -> Self {
        let scale = 1000.0 / timesteps as f64;
        Self {
            timesteps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::rescaled(100)
    }
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// `β_t` linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            Err(Error::TimestepOutOfRange { t, max: self.len() })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Closed-form corruption `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε` with one timestep
/// per leading-axis item.
pub fn q_sample(x0: &Tensor<f32>, timesteps: &[usize], noise: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
        ));
    }
    if timesteps.len() != x0.shape()[0] {
        return Err(Error::shape(
            "q_sample",
            format!("{} timesteps for {} items", timesteps.len(), x0.shape()[0]),
        ));
    }
    let per = x0.len() / x0.shape()[0];
    let mut out = Tensor::zeros(x0.shape().to_vec());
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let range = i * per..(i + 1) * per;
        for ((o, &x), &e) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&x0.data()[range.clone()])
            .zip(&noise.data()[range])
        {
            *o = a * x + b * e;
        }
    }
    Ok(out)
}

/// One forward step `x_t = √α_t x_{t-1} + √β_t ε`.
pub fn q_step(x_prev: &Tensor<f32>, t: usize, noise: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    if x_prev.shape() != noise.shape() {
        return Err(Error::shape("q_step", "noise shape differs from input"));
    }
    let a = schedule.alpha(t)?.sqrt() as f32;
    let b = schedule.beta(t)?.sqrt() as f32;
    let data = x_prev.data().iter().zip(noise.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x_prev.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f32,
    /// One gradient per parameter (masked positions exactly zero).
    pub grads: Vec<Tensor<f32>>,
}

/// ε-prediction MSE on a batch: draws `t ~ U{1..T}` and `ε ~ N(0, I)` from
/// `noise_rng` (timesteps first, then noise in row-major order).
pub fn training_loss(
    model: &UNet,
    params: &ParameterSet,
    mask: &MaskSet,
    x0: &Tensor<f32>,
    schedule: &NoiseSchedule,
    noise_rng: &mut ChaCha8Rng,
) -> Result<LossAndGrads> {
    let b = x0.shape()[0];
    let timesteps: Vec<usize> = (0..b).map(|_| noise_rng.random_range(1..=schedule.len())).collect();
    let mut noise = Tensor::zeros(x0.shape().to_vec());
    rng::fill_normal(noise_rng, noise.data_mut());
    loss_at(model, params, mask, x0, &timesteps, &noise, schedule)
}

/// Same objective with caller-supplied timesteps and noise.
pub fn loss_at(
    model: &UNet,
    params: &ParameterSet,
    mask: &MaskSet,
    x0: &Tensor<f32>,
    timesteps: &[usize],
    noise: &Tensor<f32>,
    schedule: &NoiseSchedule,
) -> Result<LossAndGrads> {
    let x_t = q_sample(x0, timesteps, noise, schedule)?;
    let mut pass = model.forward(params, mask, &x_t, timesteps, schedule.len())?;
    let target = pass.tape.leaf(noise.clone());
    let loss = pass.tape.mse_loss(pass.output, target)?;
    let value = pass.tape.value(loss).data()[0];
    let grads = pass.param_grads(loss)?;
    Ok(LossAndGrads { loss: value, grads })
}

#[derive(Debug, Clone)]
pub struct Samples {
    /// `[n, C, H, W]`, clamped to `[-1, 1]`.
    pub images: Tensor<f32>,
    /// `(t, x_t)` snapshots of the first image, from `x_T` down to the final
    /// clamped `x_0` (reported as t = 0).
    pub trajectory: Vec<(usize, Tensor<f32>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub batch_size: usize,
    /// Record the first image every this many steps (0 disables).
    pub trajectory_every: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            trajectory_every: 0,
        }
    }
}

/// One ancestral reverse step from `x_t` given the predicted noise:
/// `μ = (x_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`, plus `√β_t z` when `t > 1`.
pub fn reverse_step(x_t: &mut [f32], eps: &[f32], t: usize, schedule: &NoiseSchedule, z: Option<&[f32]>) -> Result<()> {
    let beta = schedule.beta(t)?;
    let coef = (beta / (1.0 - schedule.alpha_bar(t)?).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / schedule.alpha(t)?.sqrt()) as f32;
    let sigma = beta.sqrt() as f32;
    for (i, x) in x_t.iter_mut().enumerate() {
        let mean = (*x - coef * eps[i]) * inv_sqrt_alpha;
        *x = match z {
            Some(z) if t > 1 => mean + sigma * z[i],
            _ => mean,
        };
    }
    Ok(())
}

/// Ancestral sampling of `n` images starting from `x_T ~ N(0, I)`.
///
/// Each batch draws its initial noise and then one fresh noise tensor per
/// step from the sampling stream of `seed`, so results depend only on
/// `(seed, n, batch_size)`.
pub fn sample(
    model: &UNet,
    params: &ParameterSet,
    mask: &MaskSet,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<Samples> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let c = model.config();
    let per = c.image_channels * c.image_size * c.image_size;
    let mut rng = rng::stream(seed, Stream::Sampling);
    let mut images = Vec::with_capacity(n * per);
    let mut trajectory = Vec::new();
    let batch = opts.batch_size.max(1);
    let mut start = 0;
    while start < n {
        let b = batch.min(n - start);
        let shape = [b, c.image_channels, c.image_size, c.image_size];
        let mut x = Tensor::zeros(shape);
        rng::fill_normal(&mut rng, x.data_mut());
        let mut z = vec![0.0f32; b * per];
        for t in (1..=schedule.len()).rev() {
            if start == 0 && opts.trajectory_every > 0 && (t == schedule.len() || t % opts.trajectory_every == 0) {
                trajectory.push((t, first_item(&x)?));
            }
            let eps = model.predict_noise(params, mask, &x, &vec![t; b], schedule.len())?;
            let noise = if t > 1 {
                rng::fill_normal(&mut rng, &mut z);
                Some(z.as_slice())
            } else {
                None
            };
            reverse_step(x.data_mut(), eps.data(), t, schedule, noise)?;
        }
        for v in x.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        if start == 0 && opts.trajectory_every > 0 {
            trajectory.push((0, first_item(&x)?));
        }
        images.extend_from_slice(x.data());
        start += b;
    }
    Ok(Samples {
        images: Tensor::new([n, c.image_channels, c.image_size, c.image_size], images)?,
        trajectory,
    })
}

fn first_item(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, x.item(0).to_vec())
}

/// Timestep features exposed for inspection (`[n, dim]`).
pub fn timestep_features(timesteps: &[usize], dim: usize) -> Result<Tensor<f32>> {
    ops::sinusoidal_embedding(timesteps, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_examples() {
        let s = NoiseSchedule::linear(1, 0.1, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        for (a, e) in s.betas().iter().zip([0.1, 0.2, 0.3]) {
            assert!((a - e).abs() < 1e-15);
        }
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.81).abs() < 1e-15);
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(3, 0.3, 0.1).is_err());
        assert!(NoiseSchedule::linear(3, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_is_cumulative_product_and_decreasing() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let mut prod = 1.0f64;
        for t in 1..=s.len() {
            prod *= 1.0 - s.beta(t).unwrap();
            assert_eq!(s.alpha_bar(t).unwrap(), prod);
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
        let d = DiffusionConfig::default();
        assert!((d.beta_start - 1e-3).abs() < 1e-15 && (d.beta_end - 0.2).abs() < 1e-15);
    }

    #[test]
    fn q_sample_without_noise_scales_signal() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x0 = Tensor::from_fn([2, 1, 2, 2], |i| i as f32 / 8.0 - 0.5);
        let eps = Tensor::zeros([2, 1, 2, 2]);
        let xt = q_sample(&x0, &[3, 7], &eps, &s).unwrap();
        for i in 0..2 {
            let a = s.alpha_bar([3, 7][i]).unwrap().sqrt() as f32;
            for (o, x) in xt.item(i).iter().zip(x0.item(i)) {
                assert_eq!(*o, a * x);
            }
        }
        assert!(q_sample(&x0, &[0, 1], &eps, &s).is_err());
    }

    #[test]
    fn q_sample_converges_to_noise() {
        let s = NoiseSchedule::linear(20, 0.5, 0.5).unwrap();
        assert!(s.alpha_bar(20).unwrap() < 1e-6);
        let x0 = Tensor::full([1, 1, 1, 4], 0.9f32);
        let eps = Tensor::new([1, 1, 1, 4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let xt = q_sample(&x0, &[20], &eps, &s).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - e).abs() < 1e-3 * 0.9);
        }
    }
}

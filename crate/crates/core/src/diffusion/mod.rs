//! DDPM forward process, the noise-prediction objective and adapter
//! training.

mod dataset;
mod train;

pub use dataset::{read_split, write_split, BatchSampler, Sample, TrainDataset, DEFAULT_REPEATS};
pub use train::{build_reg_images, pretrain_base, train_adapter, train_adapter_with_progress, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::unet::UNet;

/// Linear beta schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Forward-process constants for timesteps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `ln σ_t` with `σ_t = sqrt((1 - ᾱ_t) / ᾱ_t)`, increasing in t.
    log_sigmas: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<NoiseSchedule> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs steps >= 2 and 0 < beta_start <= beta_end < 1, got {config:?}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let log_sigmas = alpha_bars.iter().map(|ab| ((1.0 - ab) / ab).sqrt().ln()).collect();
        Ok(NoiseSchedule {
            config,
            betas,
            alpha_bars,
            log_sigmas,
        })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!((1..=self.steps()).contains(&t), "timestep {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// Noise-to-signal ratio of timestep `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.log_sigmas[self.idx(t)].exp()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma(1)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma(self.steps())
    }

    /// Fractional timestep for a noise level, interpolating linearly in
    /// log-sigma and clamping to `[1, T]`.
    pub fn t_for_sigma(&self, sigma: f64) -> f64 {
        let ls = sigma.max(f64::MIN_POSITIVE).ln();
        let n = self.log_sigmas.len();
        if ls <= self.log_sigmas[0] {
            return 1.0;
        }
        if ls >= self.log_sigmas[n - 1] {
            return n as f64;
        }
        let hi = self.log_sigmas.partition_point(|v| *v < ls);
        let lo = hi - 1;
        let w = (ls - self.log_sigmas[lo]) / (self.log_sigmas[hi] - self.log_sigmas[lo]);
        (lo + 1) as f64 + w
    }

    fn per_sample(&self, x: &Tensor<impl Element>, t: &[usize]) -> Result<usize> {
        let b = *x.shape().first().unwrap_or(&0);
        if t.len() != b {
            return Err(Error::contract(format!("{} timesteps for batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|t| !(1..=self.steps()).contains(*t)) {
            return Err(Error::contract(format!("timestep {bad} outside 1..={}", self.steps())));
        }
        Ok(x.numel() / b.max(1))
    }

    /// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`, per batch item.
    pub fn add_noise<T: Element>(&self, x0: &Tensor<T>, eps: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape("add_noise", x0.shape(), eps.shape()));
        }
        let per = self.per_sample(x0, t)?;
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar(ti);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let range = i * per..(i + 1) * per;
            out.extend(
                x0.data()[range.clone()]
                    .iter()
                    .zip(&eps.data()[range])
                    .map(|(x, e)| T::from_f64(a * x.as_f64() + b * e.as_f64())),
            );
        }
        Tensor::new(out, x0.shape())
    }

    /// Inverts [`add_noise`](Self::add_noise) given the noise.
    pub fn predict_x0<T: Element>(&self, x_t: &Tensor<T>, eps: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        if x_t.shape() != eps.shape() {
            return Err(Error::shape("predict_x0", x_t.shape(), eps.shape()));
        }
        let per = self.per_sample(x_t, t)?;
        let mut out = Vec::with_capacity(x_t.numel());
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar(ti);
            let range = i * per..(i + 1) * per;
            out.extend(
                x_t.data()[range.clone()]
                    .iter()
                    .zip(&eps.data()[range])
                    .map(|(x, e)| T::from_f64((x.as_f64() - (1.0 - ab).sqrt() * e.as_f64()) / ab.sqrt())),
            );
        }
        Tensor::new(out, x_t.shape())
    }
}

/// Anything that predicts the noise in `x_t` given captions.
pub trait NoisePredictor<T: Element> {
    fn predict(&self, x_t: &Tensor<T>, t: &[f64], captions: &[&str]) -> Result<Tensor<T>>;
}

/// A model with a fixed set of active adapters.
pub struct Adapted<'a, T: Element> {
    pub model: &'a UNet<T>,
    pub adapters: Vec<(&'a Adapter<T>, f64)>,
}

impl<T: Element> NoisePredictor<T> for Adapted<'_, T> {
    fn predict(&self, x_t: &Tensor<T>, t: &[f64], captions: &[&str]) -> Result<Tensor<T>> {
        let cond = self.model.encode_condition(captions)?;
        self.model.forward(x_t, t, &cond, &self.adapters)
    }
}

impl<T: Element> NoisePredictor<T> for UNet<T> {
    fn predict(&self, x_t: &Tensor<T>, t: &[f64], captions: &[&str]) -> Result<Tensor<T>> {
        let cond = self.encode_condition(captions)?;
        self.predict_noise(x_t, t, &cond)
    }
}

/// Timesteps and noise for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T: Element> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Draws `t ~ U{1..T}` per item, then `ε ~ N(0, I)` of the given shape.
pub fn draw_noise<T: Element>(shape: &[usize], schedule: &NoiseSchedule, rng: &mut impl Rng) -> NoiseDraw<T> {
    let t = (0..shape[0]).map(|_| rng.random_range(1..=schedule.steps())).collect();
    draw_noise_at(shape, t, rng)
}

/// Draws `ε ~ N(0, I)` for given timesteps.
pub fn draw_noise_at<T: Element>(shape: &[usize], t: Vec<usize>, rng: &mut impl Rng) -> NoiseDraw<T> {
    let n: usize = shape.iter().product();
    let eps = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z)
        })
        .collect();
    NoiseDraw {
        t,
        eps: Tensor::new(eps, shape).expect("length matches shape"),
    }
}

fn timesteps_f64(t: &[usize]) -> Vec<f64> {
    t.iter().map(|&t| t as f64).collect()
}

fn numeric_at(t: &[usize], err: Error) -> Error {
    if err.is_numeric() {
        Error::NonFinite {
            op: format!("ddpm loss at t={t:?}"),
        }
    } else {
        err
    }
}

/// Noise-prediction MSE for a given draw.
pub fn ddpm_loss_with<T: Element>(
    predictor: &dyn NoisePredictor<T>,
    x0: &Tensor<T>,
    captions: &[&str],
    schedule: &NoiseSchedule,
    draw: &NoiseDraw<T>,
) -> Result<Tensor<T>> {
    let x_t = schedule.add_noise(x0, &draw.eps, &draw.t)?;
    let pred = predictor
        .predict(&x_t, &timesteps_f64(&draw.t), captions)
        .map_err(|e| numeric_at(&draw.t, e))?;
    let loss = pred.mse(&draw.eps).map_err(|e| numeric_at(&draw.t, e))?;
    if !loss.all_finite() {
        return Err(numeric_at(&draw.t, Error::NonFinite { op: String::new() }));
    }
    Ok(loss)
}

/// `mean ‖ε − ε̂(x_t, t, c)‖²` with `t` and `ε` drawn from `rng`.
pub fn ddpm_loss<T: Element>(
    predictor: &dyn NoisePredictor<T>,
    x0: &Tensor<T>,
    captions: &[&str],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let draw = draw_noise(x0.shape(), schedule, rng);
    ddpm_loss_with(predictor, x0, captions, schedule, &draw)
}

/// How training picks timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// Independent uniform draws.
    Uniform,
    /// A randomly offset golden-ratio sequence: still uniform on `1..=T`
    /// for every item, but consecutive items cover the range evenly, which
    /// keeps short windows of the loss curve comparable.
    LowDiscrepancy,
}

/// Stateful timestep source for a training run.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    mode: TimestepSampling,
    offset: f64,
    count: u64,
}

impl TimestepSampler {
    pub fn new(mode: TimestepSampling, rng: &mut impl Rng) -> TimestepSampler {
        TimestepSampler {
            mode,
            offset: rng.random(),
            count: 0,
        }
    }

    pub fn draw(&mut self, n: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Vec<usize> {
        let steps = schedule.steps();
        (0..n)
            .map(|_| match self.mode {
                TimestepSampling::Uniform => rng.random_range(1..=steps),
                TimestepSampling::LowDiscrepancy => {
                    const GOLDEN: f64 = 0.618_033_988_749_894_8;
                    let u = (self.offset + self.count as f64 * GOLDEN).fract();
                    self.count += 1;
                    ((u * steps as f64) as usize).min(steps - 1) + 1
                }
            })
            .collect()
    }
}

/// Seeded generator used for all training randomness.
pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

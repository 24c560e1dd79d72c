//! DPM-Solver++(2M) over a Karras noise schedule with classifier-free
//! guidance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::data::Image;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Element, Tensor};
use crate::unet::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            cfg_scale: 7.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            seed: 0,
            resolution: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// Karras levels for `steps` denoiser evaluations, ending in 0.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        if self.steps == 1 {
            return Ok(vec![self.sigma_max, 0.0]);
        }
        karras_sigmas(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

/// `σᵢ = (σmax^(1/ρ) + i/(n-1) (σmin^(1/ρ) - σmax^(1/ρ)))^ρ` for
/// `i = 0..n`, followed by a terminal 0.
pub fn karras_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::contract(format!("karras schedule needs n >= 2, got {n}")));
    }
    let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    // Pin the endpoints against rounding in the power round trip.
    out[0] = sigma_max;
    out[n - 1] = sigma_min;
    out.push(0.0);
    Ok(out)
}

/// `ε_u + s (ε_c - ε_u)`.
pub fn cfg_combine<T: Element>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::contract(format!(
            "cfg_combine shapes differ: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(c, u)| T::from_f64(u.as_f64() + scale * (c.as_f64() - u.as_f64())))
        .collect();
    Tensor::new(data, eps_cond.shape())
}

/// DPM-Solver++(2M): multistep second-order updates in `λ = -ln σ` on the
/// data prediction `denoise(x, σ, step)`. The first step, and any step
/// into σ = 0, is first order.
pub fn dpmpp_2m(
    mut x: Vec<f64>,
    sigmas: &[f64],
    mut denoise: impl FnMut(&[f64], f64, usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut old: Option<Vec<f64>> = None;
    for i in 0..sigmas.len().saturating_sub(1) {
        let (s, s_next) = (sigmas[i], sigmas[i + 1]);
        let d = denoise(&x, s, i)?;
        if d.len() != x.len() {
            return Err(Error::contract(format!("denoiser returned {} values for {}", d.len(), x.len())));
        }
        if s_next == 0.0 {
            x = d;
            break;
        }
        let h = s.ln() - s_next.ln();
        let ratio = s_next / s;
        let coef = -(-h).exp_m1();
        match &old {
            Some(prev) if i > 0 => {
                let h_last = sigmas[i - 1].ln() - s.ln();
                let r = h_last / h;
                let (w_new, w_old) = (1.0 + 1.0 / (2.0 * r), 1.0 / (2.0 * r));
                for ((xv, dv), pv) in x.iter_mut().zip(&d).zip(prev) {
                    *xv = ratio * *xv + coef * (w_new * dv - w_old * pv);
                }
            }
            _ => {
                for (xv, dv) in x.iter_mut().zip(&d) {
                    *xv = ratio * *xv + coef * dv;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("sampler step {i}"),
            });
        }
        old = Some(d);
    }
    Ok(x)
}

/// Generates one image with the given adapters active. The negative prompt
/// (usually empty) supplies the unconditional branch of guidance.
pub fn sample<T: Element>(
    model: &UNet<T>,
    adapters: &[(&Adapter<T>, f64)],
    prompt: &str,
    negative_prompt: &str,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    config.validate()?;
    let size = model.config().image_size;
    if config.resolution != size {
        return Err(Error::Config(format!(
            "sampler resolution {} differs from model image size {size}",
            config.resolution
        )));
    }
    for (a, _) in adapters {
        if a.base_model_fingerprint != model.base_fingerprint() {
            return Err(Error::Compatibility(format!(
                "adapter '{}' was trained on {}, model is {}",
                a.name,
                a.base_model_fingerprint,
                model.base_fingerprint()
            )));
        }
    }
    let shape = [1, model.config().in_channels, size, size];
    let n: usize = shape.iter().product();
    let sigmas = config.sigmas()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x0: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * sigmas[0])
        .collect();
    no_grad(|| {
        let cond = model
            .encode_condition(&[prompt])?
            .concat(&model.encode_condition(&[negative_prompt])?)?;
        let batch_shape = [2, shape[1], size, size];
        let x = dpmpp_2m(x0, &sigmas, |x, sigma, step| {
            let c_in = 1.0 / (sigma * sigma + 1.0).sqrt();
            let input: Vec<T> = x.iter().chain(x).map(|v| T::from_f64(v * c_in)).collect();
            let input = Tensor::new(input, &batch_shape)?;
            let t = schedule.t_for_sigma(sigma);
            let eps = model.forward(&input, &[t, t], &cond, adapters).map_err(|e| {
                if e.is_numeric() {
                    Error::NonFinite {
                        op: format!("sampler step {step}"),
                    }
                } else {
                    e
                }
            })?;
            let eps = cfg_combine(&eps.narrow_batch(0, 1)?, &eps.narrow_batch(1, 1)?, config.cfg_scale)?;
            Ok(x.iter().zip(eps.data()).map(|(xv, e)| xv - sigma * e.as_f64()).collect())
        })?;
        let t = Tensor::<f64>::new(x, &shape)?;
        Image::from_tensor(&t, 0)
    })
}

/// One adapter entry in a generation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterUse {
    pub name: String,
    pub strength: f64,
}

/// Sidecar metadata written next to every generated PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sampler: SamplerConfig,
    pub prompt: String,
    pub negative_prompt: String,
    pub adapters: Vec<AdapterUse>,
    pub seeds: Vec<u64>,
    pub base_model_fingerprint: String,
}

/// Writes `<stem>.png` and `<stem>.json`.
pub fn write_generation(png: &Path, image: &Image, record: &GenerationRecord) -> Result<()> {
    image.save_png(png)?;
    std::fs::write(png.with_extension("json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

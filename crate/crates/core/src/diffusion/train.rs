use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{draw_noise_at, numeric_at, TimestepSampler, TimestepSampling, rng, timesteps_f64, BatchSampler, NoiseSchedule, Sample, TrainDataset};
use crate::adapter::Adapter;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::{Element, Gradients, Tensor};
use crate::unet::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight λ of the regularization loss.
    pub prior_weight: f64,
    pub seed: u64,
    /// Probability of replacing a caption with the empty caption.
    pub caption_dropout: f64,
    pub weight_decay: f64,
    pub timestep_sampling: TimestepSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            learning_rate: 1e-3,
            prior_weight: 1.0,
            seed: 0,
            caption_dropout: 0.0,
            weight_decay: 0.0,
            timestep_sampling: TimestepSampling::LowDiscrepancy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "steps and batch_size must be at least 1, got {} and {}",
                self.steps, self.batch_size
            )));
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::Config(format!("prior_weight must be >= 0, got {}", self.prior_weight)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config(format!("caption_dropout must lie in [0, 1], got {}", self.caption_dropout)));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        })
    }
}

/// Per-step losses. `reg_losses` is empty when training without
/// regularization images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub instance_losses: Vec<f64>,
    pub reg_losses: Vec<f64>,
    /// Parameters the optimizer holds moment estimates for.
    #[serde(default)]
    pub optimizer_state: Vec<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl TrainReport {
    /// Mean of the first `n` total losses.
    pub fn head_mean(&self, n: usize) -> Option<f64> {
        mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean of the last `n` total losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

struct StepLoss<T: Element> {
    total: Tensor<T>,
    instance: f64,
    reg: Option<f64>,
}

fn captions<'a>(samples: &'a [&Sample], dropout: f64, rng: &mut impl Rng) -> Vec<&'a str> {
    samples
        .iter()
        .map(|s| {
            if dropout > 0.0 && rng.random::<f64>() < dropout {
                ""
            } else {
                s.caption.as_str()
            }
        })
        .collect()
}

/// One forward pass over the instance batch followed by the regularization
/// batch; `L = L_instance + λ L_reg`.
fn step_loss<T: Element>(
    model: &UNet<T>,
    adapters: &[(&Adapter<T>, f64)],
    instance: &[&Sample],
    reg: &[&Sample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    timesteps: &mut TimestepSampler,
    rng: &mut impl Rng,
) -> Result<StepLoss<T>> {
    let all: Vec<&Sample> = instance.iter().chain(reg).copied().collect();
    let caps = captions(&all, config.caption_dropout, rng);
    let images: Vec<&Image> = all.iter().map(|s| &s.image).collect();
    let x0 = Image::batch::<T>(&images)?;
    let t = timesteps.draw(all.len(), schedule, rng);
    let draw = draw_noise_at::<T>(x0.shape(), t, rng);
    let x_t = schedule.add_noise(&x0, &draw.eps, &draw.t)?;
    let cond = model.encode_condition(&caps)?;
    let pred = model
        .forward(&x_t, &timesteps_f64(&draw.t), &cond, adapters)
        .map_err(|e| numeric_at(&draw.t, e))?;
    let n = instance.len();
    let inst = pred
        .narrow_batch(0, n)?
        .mse(&draw.eps.narrow_batch(0, n)?)
        .map_err(|e| numeric_at(&draw.t, e))?;
    let mut out = StepLoss {
        instance: inst.item()?.as_f64(),
        total: inst,
        reg: None,
    };
    if !reg.is_empty() {
        let r = pred
            .narrow_batch(n, reg.len())?
            .mse(&draw.eps.narrow_batch(n, reg.len())?)
            .map_err(|e| numeric_at(&draw.t, e))?;
        out.reg = Some(r.item()?.as_f64());
        out.total = out.total.add(&r.scale(config.prior_weight)?)?;
    }
    if !out.total.all_finite() {
        return Err(numeric_at(&draw.t, Error::NonFinite { op: String::new() }));
    }
    Ok(out)
}

fn record<T: Element>(report: &mut TrainReport, loss: &StepLoss<T>) -> Result<f64> {
    let total = loss.total.item()?.as_f64();
    report.losses.push(total);
    report.instance_losses.push(loss.instance);
    if let Some(r) = loss.reg {
        report.reg_losses.push(r);
    }
    Ok(total)
}

/// Trains the adapter's factors on `dataset` with the base model frozen.
pub fn train_adapter<T: Element>(
    model: &UNet<T>,
    adapter: &mut Adapter<T>,
    dataset: &TrainDataset,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainReport> {
    train_adapter_with_progress(model, adapter, dataset, config, schedule, |_, _| {})
}

/// [`train_adapter`] with a callback receiving `(step, loss)` after every
/// optimizer step.
pub fn train_adapter_with_progress<T: Element>(
    model: &UNet<T>,
    adapter: &mut Adapter<T>,
    dataset: &TrainDataset,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    if adapter.base_model_fingerprint != model.base_fingerprint() {
        return Err(Error::Compatibility(format!(
            "adapter '{}' targets {}, model is {}",
            adapter.name,
            adapter.base_model_fingerprint,
            model.base_fingerprint()
        )));
    }
    if dataset.image_size != model.config().image_size {
        return Err(Error::Config(format!(
            "dataset image size {} differs from model image size {}",
            dataset.image_size,
            model.config().image_size
        )));
    }
    dataset.validate_captions(&adapter.trigger_token)?;
    let before = model.fingerprint();
    adapter.set_trainable(true);
    let mut opt = config.optimizer();
    let mut rng = rng(config.seed, 1);
    let mut timesteps = TimestepSampler::new(config.timestep_sampling, &mut rng);
    let mut inst_sampler = BatchSampler::new(dataset.instance.len(), dataset.repeats);
    let mut reg_sampler = BatchSampler::new(dataset.reg.len(), 1);
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let inst: Vec<&Sample> = inst_sampler
            .batch(config.batch_size, &mut rng)
            .into_iter()
            .map(|i| &dataset.instance[i])
            .collect();
        let reg: Vec<&Sample> = reg_sampler
            .batch(config.batch_size, &mut rng)
            .into_iter()
            .map(|i| &dataset.reg[i])
            .collect();
        let grads: Gradients<T> = {
            let active = [(&*adapter, 1.0)];
            let loss = step_loss(model, &active, &inst, &reg, config, schedule, &mut timesteps, &mut rng)?;
            let total = record(&mut report, &loss)?;
            progress(step, total);
            loss.total.backward()?
        };
        if let Some(name) = grads.names().find(|n| adapter.parameters().all(|p| p.name != *n)) {
            return Err(Error::State(format!("gradient reached non-adapter parameter '{name}'")));
        }
        opt.step(&mut adapter.parameters_mut(), &grads)?;
    }
    report.optimizer_state = opt.state_names().map(str::to_string).collect();
    if model.fingerprint() != before {
        return Err(Error::State("base model parameters changed during adapter training".into()));
    }
    Ok(report)
}

/// Trains every base weight on a captioned corpus, then freezes the model
/// and declares the result a new base.
pub fn pretrain_base(
    model: &mut UNet<f32>,
    corpus: &[Sample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if let Some(bad) = corpus.iter().find(|s| s.image.size != model.config().image_size) {
        return Err(Error::Config(format!(
            "corpus image size {} differs from model image size {}",
            bad.image.size,
            model.config().image_size
        )));
    }
    model.set_base_trainable(true);
    let mut opt = config.optimizer();
    let mut rng = rng(config.seed, 2);
    let mut timesteps = TimestepSampler::new(config.timestep_sampling, &mut rng);
    let mut sampler = BatchSampler::new(corpus.len(), 1);
    let mut report = TrainReport::default();
    let result = (|| -> Result<()> {
        for step in 0..config.steps {
            let batch: Vec<&Sample> = sampler
                .batch(config.batch_size, &mut rng)
                .into_iter()
                .map(|i| &corpus[i])
                .collect();
            let grads = {
                let loss = step_loss(model, &[], &batch, &[], config, schedule, &mut timesteps, &mut rng)?;
                let total = record(&mut report, &loss)?;
                progress(step, total);
                loss.total.backward()?
            };
            let mut params: Vec<_> = model.parameters_mut().collect();
            opt.step(&mut params, &grads)?;
        }
        Ok(())
    })();
    model.set_base_trainable(false);
    result?;
    model.rebase();
    Ok(report)
}

/// Samples `count` class images from the bare base model, image `i` with
/// seed `sampler.seed + i`.
pub fn build_reg_images<T: Element>(
    model: &UNet<T>,
    class_caption: &str,
    count: usize,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<Sample>> {
    if !model.active().is_empty() {
        return Err(Error::State("regularization images must come from the base model without adapters".into()));
    }
    (0..count as u64)
        .map(|i| {
            let cfg = SamplerConfig {
                seed: sampler.seed + i,
                ..sampler.clone()
            };
            Ok(Sample {
                image: sample(model, &[], class_caption, "", &cfg, schedule)?,
                caption: class_caption.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{inject, AdapterKind, BlockRankPolicy};
    use crate::unet::{BlockId, ConditionEncoder, UNetConfig};

    fn tiny() -> UNet<f32> {
        let enc = ConditionEncoder::new(["<c>", "a", "b"]);
        UNet::<f32>::build(UNetConfig::tiny(), enc, 3).unwrap()
    }

    fn dataset(size: usize) -> TrainDataset {
        let inst = (0..4)
            .map(|i| Sample {
                image: Image::filled(size, [0.2 * i as f32, 0.5, 0.9]),
                caption: "<c>, a".into(),
            })
            .collect();
        let reg = vec![Sample {
            image: Image::filled(size, [0.1, 0.1, 0.1]),
            caption: "a".into(),
        }];
        TrainDataset::new(inst, reg, 2).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.steps, c.batch_size, c.learning_rate, c.prior_weight), (2000, 2, 1e-3, 1.0));
        let long_run: TrainConfig = serde_json::from_str(r#"{"steps": 11000}"#).unwrap();
        long_run.validate().unwrap();
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { prior_weight: -1.0, ..c }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 1}"#).is_err());
    }

    #[test]
    fn zero_weight_prior_ignores_regularization() {
        let model = tiny();
        let ds = dataset(16);
        let a = inject(&model, "x", &BlockRankPolicy::full(2, AdapterKind::Locon), "<c>", 0).unwrap();
        let cfg = TrainConfig {
            prior_weight: 0.0,
            ..Default::default()
        };
        let inst: Vec<&Sample> = ds.instance.iter().take(2).collect();
        let reg: Vec<&Sample> = ds.reg.iter().collect();
        let mut r = rng(0, 0);
        let mut ts = TimestepSampler::new(TimestepSampling::Uniform, &mut r);
        let l = step_loss(&model, &[(&a, 1.0)], &inst, &reg, &cfg, &NoiseSchedule::default(), &mut ts, &mut r).unwrap();
        assert_eq!(l.total.item().unwrap() as f64, l.instance);
        assert!(l.reg.unwrap() > 0.0);
    }

    #[test]
    fn only_active_blocks_train() {
        let model = tiny();
        let ds = dataset(16);
        let policy = BlockRankPolicy::only(&[BlockId::In0, BlockId::Out3], 2, AdapterKind::Locon);
        let mut a = inject(&model, "s", &policy, "<c>", 1).unwrap();
        let before: Vec<_> = a.parameters().map(|p| p.data().to_vec()).collect();
        let cfg = TrainConfig {
            steps: 3,
            ..Default::default()
        };
        let rep = train_adapter(&model, &mut a, &ds, &cfg, &NoiseSchedule::default()).unwrap();
        assert_eq!(rep.losses.len(), 3);
        assert_eq!(rep.reg_losses.len(), 3);
        assert!(a.blocks().iter().all(|b| matches!(b, BlockId::In0 | BlockId::Out3)));
        let after: Vec<_> = a.parameters().map(|p| p.data().to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn trigger_mismatch_is_rejected() {
        let model = tiny();
        let mut a = inject(&model, "x", &BlockRankPolicy::full(2, AdapterKind::Lora), "b", 0).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(train_adapter(&model, &mut a, &dataset(16), &cfg, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn pretraining_rebases_and_freezes() {
        let mut model = tiny();
        let ds = dataset(16);
        let old = model.base_fingerprint().to_string();
        let cfg = TrainConfig {
            steps: 2,
            caption_dropout: 0.5,
            ..Default::default()
        };
        pretrain_base(&mut model, &ds.instance, &cfg, &NoiseSchedule::default(), |_, _| {}).unwrap();
        assert_ne!(model.base_fingerprint(), old);
        assert_eq!(model.base_fingerprint(), model.fingerprint());
        assert!(model.parameters().all(|p| !p.trainable));
    }

    #[test]
    fn reg_images_are_reproducible() {
        let model = tiny();
        let cfg = SamplerConfig {
            steps: 3,
            resolution: 16,
            ..Default::default()
        };
        let s = NoiseSchedule::default();
        assert!(build_reg_images(&model, "a", 0, &cfg, &s).unwrap().is_empty());
        let a = build_reg_images(&model, "a", 2, &cfg, &s).unwrap();
        let b = build_reg_images(&model, "a", 2, &cfg, &s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[1].image);
        assert_eq!(a[0].caption, "a");
    }
}

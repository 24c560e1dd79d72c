//! The end-to-end desk experiment: pretrain a small base model on synthetic
//! shapes and figures, train an identity adapter and an upper-block style
//! adapter, then compare them alone and combined.

use serde::{Deserialize, Serialize};

use crate::adapter::{inject, Adapter, AdapterKind, BlockRankPolicy};
use crate::data::synth::{self, Character};
use crate::data::Image;
use crate::diffusion::{
    build_reg_images, pretrain_base, train_adapter_with_progress, NoiseSchedule, Sample, ScheduleConfig, TrainConfig,
    TrainDataset, TrainReport, DEFAULT_REPEATS,
};
use crate::error::Result;
use crate::eval::{run_combination_study, BlockGroup, CellSpec, FidelityReport, Scorer, StudyConfig, StyleReference};
use crate::sampler::SamplerConfig;
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub corpus_size: usize,
    pub pretrain: TrainConfig,
    pub instance_count: usize,
    pub repeats: usize,
    /// Regularization images for the identity adapter.
    pub id_reg_count: usize,
    /// Regularization images for the style adapter. The default upper
    /// blocks carry no cross-attention, so a style adapter there cannot
    /// tell styled captions from class captions and prior preservation
    /// would cancel the style; the default is therefore 0.
    pub style_reg_count: usize,
    /// Sampler used for regularization images.
    pub reg_sampler: SamplerConfig,
    pub id_policy: BlockRankPolicy,
    pub style_policy: BlockRankPolicy,
    pub id_train: TrainConfig,
    pub style_train: TrainConfig,
    pub style_reference_count: usize,
    pub study: StudyConfig,
}

/// Model width used for desk runs: half the default channel count.
pub fn desk_model() -> UNetConfig {
    UNetConfig {
        base_channels: 16,
        ..UNetConfig::default()
    }
}

impl Default for DeskConfig {
    fn default() -> Self {
        let adapter_train = TrainConfig {
            steps: 1500,
            ..TrainConfig::default()
        };
        DeskConfig {
            model: desk_model(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            corpus_size: 512,
            pretrain: TrainConfig {
                steps: 2000,
                batch_size: 4,
                caption_dropout: 0.1,
                ..TrainConfig::default()
            },
            instance_count: 20,
            repeats: DEFAULT_REPEATS,
            id_reg_count: 50,
            style_reg_count: 0,
            reg_sampler: SamplerConfig::default(),
            id_policy: BlockRankPolicy::full(4, AdapterKind::Locon),
            style_policy: BlockRankPolicy::only(
                &BlockGroup::upper().blocks.into_iter().collect::<Vec<_>>(),
                4,
                AdapterKind::Locon,
            ),
            id_train: adapter_train.clone(),
            style_train: adapter_train,
            style_reference_count: 16,
            study: StudyConfig::default(),
        }
    }
}

/// Everything the desk experiment produces.
pub struct DeskOutcome {
    pub model: UNet<f32>,
    pub pretrain: TrainReport,
    pub id_adapter: Adapter<f32>,
    pub style_adapter: Adapter<f32>,
    pub id_training: TrainReport,
    pub style_training: TrainReport,
    pub study: FidelityReport,
    pub images: Vec<Vec<Image>>,
}

/// Names of the study cells, in row order.
pub const CELLS: [&str; 4] = ["base", "id_only", "style_only", "id_full+style_upper"];

fn samples(pairs: Vec<(Image, String)>) -> Vec<Sample> {
    pairs.into_iter().map(Sample::from).collect()
}

/// Runs the whole pipeline. `progress` receives `(phase, step, loss)`.
pub fn run_desk_experiment(config: &DeskConfig, mut progress: impl FnMut(&str, usize, f64)) -> Result<DeskOutcome> {
    let size = config.model.image_size;
    let schedule = NoiseSchedule::new(config.schedule)?;
    let mut model = UNet::<f32>::build(config.model.clone(), synth::vocabulary(), config.seed)?;
    let corpus = samples(synth::base_corpus(config.corpus_size, config.seed + 1, size));
    let pretrain = pretrain_base(&mut model, &corpus, &config.pretrain, &schedule, |s, l| progress("pretrain", s, l))?;

    let reg_cfg = SamplerConfig {
        resolution: size,
        seed: config.seed + 1000,
        ..config.reg_sampler.clone()
    };
    let id_reg = build_reg_images(&model, synth::ID_CLASS, config.id_reg_count, &reg_cfg, &schedule)?;
    let style_reg = build_reg_images(&model, synth::STYLE_CLASS, config.style_reg_count, &reg_cfg, &schedule)?;

    let id_data = TrainDataset::new(
        samples(synth::identity_set(config.instance_count, config.seed + 2, size)),
        id_reg,
        config.repeats,
    )?;
    let style_data = TrainDataset::new(
        samples(synth::style_set(config.instance_count, config.seed + 3, size)),
        style_reg,
        config.repeats,
    )?;

    let mut id_adapter = inject(&model, "id", &config.id_policy, synth::ID_TRIGGER, config.seed + 4)?;
    let id_training = train_adapter_with_progress(&model, &mut id_adapter, &id_data, &config.id_train, &schedule, |s, l| {
        progress("id", s, l)
    })?;
    let mut style_adapter = inject(&model, "style", &config.style_policy, synth::STYLE_TRIGGER, config.seed + 5)?;
    let style_training =
        train_adapter_with_progress(&model, &mut style_adapter, &style_data, &config.style_train, &schedule, |s, l| {
            progress("style", s, l)
        })?;

    let references: Vec<Image> = synth::style_set(config.style_reference_count, config.seed + 6, size)
        .into_iter()
        .map(|(img, _)| img)
        .collect();
    let scorer = Scorer {
        template: Character::template(size),
        style: StyleReference::new(&references)?,
    };
    let study_cfg = StudyConfig {
        sampler: SamplerConfig {
            resolution: size,
            ..config.study.sampler.clone()
        },
        ..config.study.clone()
    };
    let cells = [
        CellSpec::new(CELLS[0], vec![]),
        CellSpec::new(CELLS[1], vec![(&id_adapter, 1.0)]),
        CellSpec::new(CELLS[2], vec![(&style_adapter, 1.0)]),
        CellSpec::new(CELLS[3], vec![(&id_adapter, 1.0), (&style_adapter, 1.0)]),
    ];
    let (study, images) = run_combination_study(&model, "combination", &cells, &study_cfg, &scorer, &schedule)?;
    Ok(DeskOutcome {
        model,
        pretrain,
        id_adapter,
        style_adapter,
        id_training,
        style_training,
        study,
        images,
    })
}

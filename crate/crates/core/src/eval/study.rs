use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{identity_score, StyleReference};
use crate::adapter::{inject, Adapter, AdapterKind, BlockRankPolicy};
use crate::data::synth::IdentityTemplate;
use crate::data::{save_grid, Image};
use crate::diffusion::{train_adapter_with_progress, NoiseSchedule, TrainConfig, TrainDataset, TrainReport};
use crate::error::{Error, Result};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::Element;
use crate::unet::{BlockId, UNet};

/// A named set of blocks that an ablation adapter is allowed to touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub name: String,
    pub blocks: BTreeSet<BlockId>,
}

impl BlockGroup {
    pub fn new(name: impl Into<String>, blocks: impl IntoIterator<Item = BlockId>) -> BlockGroup {
        BlockGroup {
            name: name.into(),
            blocks: blocks.into_iter().collect(),
        }
    }

    /// The outermost encoder and decoder blocks.
    pub fn upper() -> BlockGroup {
        BlockGroup::new("upper", [BlockId::In0, BlockId::Out3])
    }

    pub fn middle() -> BlockGroup {
        BlockGroup::new("middle", [BlockId::In1, BlockId::Out2])
    }

    pub fn bottom() -> BlockGroup {
        BlockGroup::new("bottom", [BlockId::In2, BlockId::Out1])
    }

    pub fn standard() -> Vec<BlockGroup> {
        vec![BlockGroup::upper(), BlockGroup::middle(), BlockGroup::bottom()]
    }

    /// Resolves `upper`, `middle` or `bottom`.
    pub fn named(name: &str) -> Result<BlockGroup> {
        BlockGroup::standard()
            .into_iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Config(format!("unknown block group '{name}' (expected upper, middle or bottom)")))
    }

    /// Parses `name=IN0+OUT3`, or a standard group name.
    pub fn parse(text: &str) -> Result<BlockGroup> {
        match text.split_once('=') {
            None => BlockGroup::named(text.trim()),
            Some((name, blocks)) => {
                let blocks = blocks
                    .split('+')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<BTreeSet<BlockId>>>()?;
                Ok(BlockGroup {
                    name: name.trim().to_string(),
                    blocks,
                })
            }
        }
    }

    /// Rejects groups that share a block or a name.
    pub fn check_disjoint(groups: &[BlockGroup]) -> Result<()> {
        for (i, a) in groups.iter().enumerate() {
            for b in &groups[i + 1..] {
                if a.name == b.name {
                    return Err(Error::contract(format!("block group '{}' listed twice", a.name)));
                }
                if let Some(shared) = a.blocks.intersection(&b.blocks).next() {
                    return Err(Error::contract(format!(
                        "block groups '{}' and '{}' both contain {shared}",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scoring references for a study.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub template: IdentityTemplate,
    pub style: StyleReference,
}

/// Prompt, seeds and sampler settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub prompt: String,
    pub negative_prompt: String,
    pub seeds: Vec<u64>,
    pub sampler: SamplerConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            prompt: "<char>, <style>, figure".into(),
            negative_prompt: String::new(),
            seeds: (0..8).collect(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// One row of a study: a named set of adapters with strengths.
pub struct CellSpec<'a, T: Element> {
    pub name: String,
    pub adapters: Vec<(&'a Adapter<T>, f64)>,
}

impl<'a, T: Element> CellSpec<'a, T> {
    pub fn new(name: impl Into<String>, adapters: Vec<(&'a Adapter<T>, f64)>) -> Self {
        CellSpec {
            name: name.into(),
            adapters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub name: String,
    pub strength: f64,
    pub ranks: BTreeMap<BlockId, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub seed: u64,
    pub identity: f64,
    pub style: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub adapters: Vec<AdapterRecord>,
    pub seeds: Vec<u64>,
    pub identity_mean: f64,
    pub style_mean: f64,
    pub per_image: Vec<ImageScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub study: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub sampler: SamplerConfig,
    pub cells: Vec<CellReport>,
}

impl FidelityReport {
    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// Generates one image per seed with the cell's adapters and scores it.
pub fn evaluate_cell<T: Element>(
    model: &UNet<T>,
    cell: &CellSpec<'_, T>,
    config: &StudyConfig,
    scorer: &Scorer,
    schedule: &NoiseSchedule,
) -> Result<(CellReport, Vec<Image>)> {
    if config.seeds.is_empty() {
        return Err(Error::Config("a study needs at least one seed".into()));
    }
    let mut images = Vec::with_capacity(config.seeds.len());
    let mut per_image = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let sampler = SamplerConfig {
            seed,
            ..config.sampler.clone()
        };
        let img = sample(model, &cell.adapters, &config.prompt, &config.negative_prompt, &sampler, schedule)?;
        per_image.push(ImageScore {
            seed,
            identity: identity_score(&img, &scorer.template)?,
            style: scorer.style.score(&img),
        });
        images.push(img);
    }
    let n = per_image.len() as f64;
    let report = CellReport {
        name: cell.name.clone(),
        adapters: cell
            .adapters
            .iter()
            .map(|(a, w)| AdapterRecord {
                name: a.name.clone(),
                strength: *w,
                ranks: a.policy.ranks.clone(),
            })
            .collect(),
        seeds: config.seeds.clone(),
        identity_mean: per_image.iter().map(|s| s.identity).sum::<f64>() / n,
        style_mean: per_image.iter().map(|s| s.style).sum::<f64>() / n,
        per_image,
    };
    Ok((report, images))
}

/// Scores every cell. Cells that use an adapter with all-zero B factors are
/// rejected, since they would silently measure the base model.
pub fn run_combination_study<T: Element>(
    model: &UNet<T>,
    study: &str,
    cells: &[CellSpec<'_, T>],
    config: &StudyConfig,
    scorer: &Scorer,
    schedule: &NoiseSchedule,
) -> Result<(FidelityReport, Vec<Vec<Image>>)> {
    for cell in cells {
        if let Some((a, _)) = cell.adapters.iter().find(|(a, _)| !a.layers().is_empty() && a.is_untrained()) {
            return Err(Error::contract(format!(
                "adapter '{}' in cell '{}' is untrained",
                a.name, cell.name
            )));
        }
    }
    let mut names = BTreeSet::new();
    if let Some(dup) = cells.iter().find(|c| !names.insert(c.name.as_str())) {
        return Err(Error::contract(format!("cell '{}' listed twice", dup.name)));
    }
    let mut report = FidelityReport {
        study: study.to_string(),
        prompt: config.prompt.clone(),
        negative_prompt: config.negative_prompt.clone(),
        sampler: config.sampler.clone(),
        cells: Vec::with_capacity(cells.len()),
    };
    let mut grids = Vec::with_capacity(cells.len());
    for cell in cells {
        let (row, images) = evaluate_cell(model, cell, config, scorer, schedule)?;
        report.cells.push(row);
        grids.push(images);
    }
    Ok((report, grids))
}

/// Style-adapter settings for a block-group ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rank: usize,
    pub kind: AdapterKind,
    pub train: TrainConfig,
    pub study: StudyConfig,
    pub id_strength: f64,
    pub style_strength: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rank: 4,
            kind: AdapterKind::Locon,
            train: TrainConfig::default(),
            study: StudyConfig::default(),
            id_strength: 1.0,
            style_strength: 1.0,
        }
    }
}

/// Outcome of a block-group ablation: the report, the generated images per
/// group, and the adapter and loss curve trained for each group.
pub struct Ablation<T: Element> {
    pub report: FidelityReport,
    pub images: Vec<Vec<Image>>,
    pub adapters: Vec<Adapter<T>>,
    pub training: Vec<TrainReport>,
}

/// Trains a fresh style adapter restricted to each group and scores it
/// combined with the identity adapter. A group with no blocks gets an empty
/// adapter and reproduces the identity-only generation.
#[allow(clippy::too_many_arguments)]
pub fn run_block_group_ablation<T: Element>(
    model: &UNet<T>,
    id_adapter: &Adapter<T>,
    style_data: &TrainDataset,
    style_trigger: &str,
    groups: &[BlockGroup],
    config: &AblationConfig,
    scorer: &Scorer,
    schedule: &NoiseSchedule,
    mut progress: impl FnMut(&str, usize, f64),
) -> Result<Ablation<T>> {
    BlockGroup::check_disjoint(groups)?;
    if id_adapter.is_untrained() {
        return Err(Error::contract(format!("adapter '{}' is untrained", id_adapter.name)));
    }
    let mut adapters = Vec::with_capacity(groups.len());
    let mut training = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let blocks: Vec<BlockId> = g.blocks.iter().copied().collect();
        let policy = BlockRankPolicy::only(&blocks, config.rank, config.kind);
        let mut a = inject(model, &format!("style_{}", g.name), &policy, style_trigger, config.train.seed + i as u64)?;
        let report = if a.layers().is_empty() {
            TrainReport::default()
        } else {
            train_adapter_with_progress(model, &mut a, style_data, &config.train, schedule, |s, l| progress(&g.name, s, l))?
        };
        adapters.push(a);
        training.push(report);
    }
    let cells: Vec<CellSpec<'_, T>> = groups
        .iter()
        .zip(&adapters)
        .map(|(g, a)| CellSpec::new(g.name.clone(), vec![(id_adapter, config.id_strength), (a, config.style_strength)]))
        .collect();
    let mut report = FidelityReport {
        study: "blocks".into(),
        prompt: config.study.prompt.clone(),
        negative_prompt: config.study.negative_prompt.clone(),
        sampler: config.study.sampler.clone(),
        cells: Vec::with_capacity(cells.len()),
    };
    let mut images = Vec::with_capacity(cells.len());
    for cell in &cells {
        let (row, imgs) = evaluate_cell(model, cell, &config.study, scorer, schedule)?;
        report.cells.push(row);
        images.push(imgs);
    }
    Ok(Ablation {
        report,
        images,
        adapters,
        training,
    })
}

/// Writes `<study>.json`, one `<study>_<cell>.png` strip per cell and the
/// combined `<study>_grid.png` with one row per cell. Returns the paths.
pub fn write_study(dir: &Path, report: &FidelityReport, images: &[Vec<Image>]) -> Result<Vec<PathBuf>> {
    if images.len() != report.cells.len() {
        return Err(Error::contract(format!(
            "{} image rows for {} cells",
            images.len(),
            report.cells.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let json = dir.join(format!("{}.json", report.study));
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    out.push(json);
    for (cell, row) in report.cells.iter().zip(images) {
        let p = dir.join(format!("{}_{}.png", report.study, cell.name));
        save_grid(&p, std::slice::from_ref(row))?;
        out.push(p);
    }
    let p = dir.join(format!("{}_grid.png", report.study));
    save_grid(&p, images)?;
    out.push(p);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_groups_are_disjoint() {
        BlockGroup::check_disjoint(&BlockGroup::standard()).unwrap();
        let overlap = [BlockGroup::upper(), BlockGroup::new("x", [BlockId::Out3, BlockId::Mid])];
        assert!(matches!(BlockGroup::check_disjoint(&overlap), Err(Error::Contract(_))));
    }

    #[test]
    fn parse_custom_group() {
        let g = BlockGroup::parse("deep=IN3+mid+OUT0").unwrap();
        assert_eq!(g.name, "deep");
        assert_eq!(g.blocks, [BlockId::In3, BlockId::Mid, BlockId::Out0].into_iter().collect());
        assert_eq!(BlockGroup::parse("upper").unwrap(), BlockGroup::upper());
        assert!(BlockGroup::parse("sideways").is_err());
        assert!(BlockGroup::parse("x=IN9").is_err());
    }
}

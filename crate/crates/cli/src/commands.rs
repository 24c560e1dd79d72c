use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bwla_core::container::Container;
use bwla_core::data::synth::{self, Character};
use bwla_core::data::Image;
use bwla_core::diffusion::{
    build_reg_images, pretrain_base, train_adapter_with_progress, write_split, Sample, TrainReport,
};
use bwla_core::eval::{
    run_block_group_ablation, run_combination_study, write_study, AblationConfig, CellSpec, Scorer, StyleReference,
};
use bwla_core::experiment::{run_desk_experiment, DeskConfig};
use bwla_core::sampler::{sample, write_generation, AdapterUse, GenerationRecord};
use bwla_core::unet::BASE_MODEL_KIND;
use bwla_core::{
    inject, merge, Adapter, BlockId, BlockRankPolicy, Error, ExperimentConfig, NoiseSchedule, TrainDataset, UNet,
};
use serde::Serialize;

use crate::parse;
use crate::{
    Cli, Command, DatasetKind, DeskArgs, FilterArgs, GenerateArgs, InitModelArgs, InspectArgs, MakeDatasetArgs,
    MakeRegArgs, MergeArgs, StudyBlocksArgs, StudyCombinationArgs, TrainArgs,
};

/// Resolved settings for one invocation.
struct Run {
    workdir: PathBuf,
    config: ExperimentConfig,
    argv: Vec<String>,
}

/// What gets written next to every artifact, enough to replay the run.
#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a [String],
    config: &'a C,
}

impl Run {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn record<C: Serialize>(&self, path: &Path, config: &C) -> Result<()> {
        let rec = RunRecord {
            command: &self.argv,
            config,
        };
        write_json(path, &rec)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.config.schedule)?)
    }

    fn scorer(&self, size: usize) -> Result<Scorer> {
        let refs: Vec<Image> = synth::style_set(self.config.dataset.style_reference_count, self.config.seed + 6, size)
            .into_iter()
            .map(|(img, _)| img)
            .collect();
        Ok(Scorer {
            template: Character::template(size),
            style: StyleReference::new(&refs)?,
        })
    }
}

fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Appends `suffix` to the file name: `a.bwla` becomes `a.bwla.run.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Accepts a plain config document or the run record of an earlier run.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let inner = match value {
        serde_json::Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").unwrap_or_default()
        }
        v => v,
    };
    Ok(ExperimentConfig::from_json(&inner.to_string())?)
}

fn progress(phase: &str, total: usize) -> impl FnMut(usize, f64) + '_ {
    move |step, loss| {
        if step % 100 == 0 || step + 1 == total {
            eprintln!("{phase} step {step}/{total} loss {loss:.5}");
        }
    }
}

fn load_model(run: &Run, path: &Path) -> Result<UNet<f32>> {
    let path = run.path(path);
    UNet::load(&path).with_context(|| format!("loading model {}", path.display()))
}

fn load_adapter(run: &Run, path: &Path) -> Result<Adapter<f32>> {
    let path = run.path(path);
    Adapter::load(&path).with_context(|| format!("loading adapter {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(&cli.workdir.join(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let run = Run {
        workdir: cli.workdir.clone(),
        config,
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::InitModel(a) => init_model(run, a),
        Command::MakeDataset(a) => make_dataset(run, a),
        Command::MakeReg(a) => make_reg(run, a),
        Command::Train(a) => train(run, a),
        Command::Generate(a) => generate(run, a),
        Command::Inspect(a) => inspect(run, a),
        Command::Filter(a) => filter(run, a),
        Command::Merge(a) => merge_cmd(run, a),
        Command::StudyCombination(a) => study_combination(run, a),
        Command::StudyBlocks(a) => study_blocks(run, a),
        Command::DeskExperiment(a) => desk(run, a),
    }
}

fn init_model(mut run: Run, a: InitModelArgs) -> Result<()> {
    if let Some(c) = a.base_channels {
        run.config.model.base_channels = c;
    }
    let steps = a.pretrain_steps.unwrap_or(run.config.pretrain.steps);
    if steps > 0 {
        run.config.pretrain.steps = steps;
    }
    run.config.validate()?;
    let cfg = &run.config;
    let mut model = UNet::<f32>::build(cfg.model.clone(), synth::vocabulary(), cfg.seed)?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    if steps > 0 {
        let corpus: Vec<Sample> = synth::base_corpus(cfg.dataset.corpus_size, cfg.seed + 1, cfg.model.image_size)
            .into_iter()
            .map(Sample::from)
            .collect();
        let report = pretrain_base(&mut model, &corpus, &cfg.pretrain, &run.schedule()?, progress("pretrain", steps))?;
        write_json(&sidecar(&out, ".losses.json"), &report)?;
    }
    model.save(&out)?;
    run.record(&sidecar(&out, ".run.json"), &run.config)?;
    println!("{} {}", out.display(), model.fingerprint());
    Ok(())
}

fn make_dataset(run: Run, a: MakeDatasetArgs) -> Result<()> {
    let cfg = &run.config;
    let count = a.count.unwrap_or(cfg.dataset.instance_count);
    let size = cfg.model.image_size;
    let pairs = match a.kind {
        DatasetKind::Identity => synth::identity_set(count, cfg.seed + 2, size),
        DatasetKind::Style => synth::style_set(count, cfg.seed + 3, size),
    };
    let out = run.path(&a.out);
    let samples: Vec<Sample> = pairs.into_iter().map(Sample::from).collect();
    write_split(&out.join("instance"), &samples)?;
    run.record(&out.join("dataset.run.json"), &run.config)?;
    println!("{} instance images in {}", samples.len(), out.join("instance").display());
    Ok(())
}

fn make_reg(run: Run, a: MakeRegArgs) -> Result<()> {
    let model = load_model(&run, &a.model)?;
    let count = a.count.unwrap_or(run.config.dataset.reg_count);
    let sampler = bwla_core::SamplerConfig {
        seed: run.config.seed + 1000,
        ..run.config.sampler.clone()
    };
    let reg = build_reg_images(&model, &a.caption, count, &sampler, &run.schedule()?)?;
    let out = run.path(&a.out);
    write_split(&out.join("reg"), &reg)?;
    run.record(&out.join("reg.run.json"), &run.config)?;
    println!("{} regularization images in {}", reg.len(), out.join("reg").display());
    Ok(())
}

fn train(mut run: Run, a: TrainArgs) -> Result<()> {
    let t = &mut run.config.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.prior_weight {
        t.prior_weight = v;
    }
    if let Some(v) = a.repeats {
        run.config.dataset.repeats = v;
    }
    if a.rank.is_some() || a.kind.is_some() || a.blocks.is_some() {
        let policy = &run.config.policy;
        let blocks: Vec<BlockId> = match &a.blocks {
            Some(list) => parse::block_list(list)?.into_iter().collect(),
            None => policy.active_blocks().into_iter().collect(),
        };
        let rank = a.rank.unwrap_or_else(|| blocks.iter().map(|b| policy.rank(*b)).max().unwrap_or(4));
        run.config.policy = BlockRankPolicy::only(&blocks, rank, a.kind.unwrap_or(policy.kind));
    }
    run.config.validate()?;
    let model = load_model(&run, &a.model)?;
    let data = TrainDataset::load_dir(&run.path(&a.dataset), run.config.dataset.repeats)?;
    let trigger = match a.trigger.clone().or_else(|| data.trigger().map(str::to_string)) {
        Some(t) => t,
        None => return Err(Error::Config("dataset captions share no trigger; pass --trigger".into()).into()),
    };
    let cfg = &run.config;
    let mut adapter = inject(&model, &a.name, &cfg.policy, &trigger, cfg.train.seed)?;
    let report = train_adapter_with_progress(
        &model,
        &mut adapter,
        &data,
        &cfg.train,
        &run.schedule()?,
        progress(&a.name, cfg.train.steps),
    )?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    adapter.save(&out)?;
    write_json(&sidecar(&out, ".losses.json"), &report)?;
    run.record(&sidecar(&out, ".run.json"), &run.config)?;
    println!("{} {}", out.display(), adapter.fingerprint());
    Ok(())
}

fn generate(mut run: Run, a: GenerateArgs) -> Result<()> {
    if let Some(v) = a.steps {
        run.config.sampler.steps = v;
    }
    if let Some(v) = a.cfg {
        run.config.sampler.cfg_scale = v;
    }
    if !a.adapters.is_empty() {
        run.config.adapters = a
            .adapters
            .iter()
            .map(|s| parse::adapter_ref(s).map(|(path, strength)| bwla_core::config::AdapterRef { path, strength }))
            .collect::<bwla_core::Result<_>>()?;
    }
    if let Some(p) = a.prompt {
        run.config.study.prompt = p;
    }
    if let Some(n) = a.negative {
        run.config.study.negative_prompt = n;
    }
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()).into());
    }
    run.config.validate()?;
    let model = load_model(&run, &a.model)?;
    let adapters = run
        .config
        .adapters
        .iter()
        .map(|r| Ok((load_adapter(&run, &r.path)?, r.strength)))
        .collect::<Result<Vec<_>>>()?;
    let active: Vec<(&Adapter<f32>, f64)> = adapters.iter().map(|(ad, w)| (ad, *w)).collect();
    let schedule = run.schedule()?;
    let out = run.path(&a.out);
    fs::create_dir_all(&out)?;
    let cfg = &run.config;
    for i in 0..a.count as u64 {
        let sampler = bwla_core::SamplerConfig {
            seed: cfg.sampler.seed + i,
            ..cfg.sampler.clone()
        };
        let img = sample(&model, &active, &cfg.study.prompt, &cfg.study.negative_prompt, &sampler, &schedule)?;
        let record = GenerationRecord {
            seeds: vec![sampler.seed],
            sampler,
            prompt: cfg.study.prompt.clone(),
            negative_prompt: cfg.study.negative_prompt.clone(),
            adapters: active
                .iter()
                .map(|(ad, w)| AdapterUse {
                    name: ad.name.clone(),
                    strength: *w,
                })
                .collect(),
            base_model_fingerprint: model.base_fingerprint().to_string(),
        };
        let png = out.join(format!("seed_{}.png", record.seeds[0]));
        write_generation(&png, &img, &record)?;
        println!("{}", png.display());
    }
    run.record(&out.join("run.json"), &run.config)
}

#[derive(Serialize)]
struct BlockRow {
    block: BlockId,
    rank: usize,
    alpha: f64,
    layers: usize,
    params: usize,
}

#[derive(Serialize)]
struct AdapterSummary {
    name: String,
    kind: String,
    trigger: String,
    base_model_fingerprint: String,
    fingerprint: String,
    parameters: usize,
    blocks: Vec<BlockRow>,
}

#[derive(Serialize)]
struct ModelSummary {
    name: String,
    kind: String,
    base_model_fingerprint: String,
    fingerprint: String,
    parameters: usize,
    config: bwla_core::UNetConfig,
}

fn inspect(run: Run, a: InspectArgs) -> Result<()> {
    let path = run.path(&a.file);
    let kind = Container::read(&path)
        .with_context(|| format!("reading {}", path.display()))?
        .meta
        .kind;
    if kind == BASE_MODEL_KIND {
        let model = UNet::<f32>::load(&path)?;
        let s = ModelSummary {
            name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            kind,
            base_model_fingerprint: model.base_fingerprint().to_string(),
            fingerprint: model.fingerprint(),
            parameters: model.parameters().map(|p| p.data().len()).sum(),
            config: model.config().clone(),
        };
        if a.json {
            println!("{}", serde_json::to_string_pretty(&s)?);
        } else {
            println!("name: {}\nkind: {}\nparameters: {}", s.name, s.kind, s.parameters);
            println!("fingerprint: {}\nbase_model_fingerprint: {}", s.fingerprint, s.base_model_fingerprint);
        }
        return Ok(());
    }
    let adapter = Adapter::<f32>::load(&path)?;
    let blocks = BlockId::ALL
        .iter()
        .map(|&b| {
            let layers: Vec<_> = adapter.layers().iter().filter(|l| l.block == b).collect();
            let rank = adapter.policy.rank(b);
            BlockRow {
                block: b,
                rank,
                alpha: if rank == 0 { 0.0 } else { adapter.policy.alpha(b) },
                layers: layers.len(),
                params: layers.iter().map(|l| l.num_params()).sum(),
            }
        })
        .collect();
    let s = AdapterSummary {
        name: adapter.name.clone(),
        kind,
        trigger: adapter.trigger_token.clone(),
        base_model_fingerprint: adapter.base_model_fingerprint.clone(),
        fingerprint: adapter.fingerprint(),
        parameters: adapter.param_count(),
        blocks,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(());
    }
    println!("name: {}\nkind: {}\ntrigger: {}", s.name, s.kind, s.trigger);
    println!("parameters: {}\nfingerprint: {}", s.parameters, s.fingerprint);
    println!("base_model_fingerprint: {}", s.base_model_fingerprint);
    println!("{:<6}{:>6}{:>8}{:>8}{:>10}", "block", "rank", "alpha", "layers", "params");
    for r in &s.blocks {
        println!("{:<6}{:>6}{:>8}{:>8}{:>10}", r.block.to_string(), r.rank, r.alpha, r.layers, r.params);
    }
    Ok(())
}

fn filter(run: Run, a: FilterArgs) -> Result<()> {
    let keep = parse::block_list(&a.keep)?;
    let adapter = load_adapter(&run, &a.file)?.filter_blocks(&keep);
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    adapter.save(&out)?;
    println!("{} {}", out.display(), adapter.fingerprint());
    Ok(())
}

fn merge_cmd(run: Run, a: MergeArgs) -> Result<()> {
    if !a.strength.is_finite() {
        return Err(Error::Config("--strength must be finite".into()).into());
    }
    let model = load_model(&run, &a.model)?;
    let adapter = load_adapter(&run, &a.adapter)?;
    let merged = merge(&model, &adapter, a.strength)?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    merged.save(&out)?;
    println!("{} {}", out.display(), merged.fingerprint());
    Ok(())
}

fn apply_study_flags(run: &mut Run, prompt: Option<String>, seeds: Option<u64>) {
    if let Some(p) = prompt {
        run.config.study.prompt = p;
    }
    if let Some(n) = seeds {
        run.config.study.seeds = (0..n).map(|i| run.config.seed + i).collect();
    }
    run.config.study.sampler = bwla_core::SamplerConfig {
        seed: run.config.study.sampler.seed,
        ..run.config.sampler.clone()
    };
}

fn study_combination(mut run: Run, a: StudyCombinationArgs) -> Result<()> {
    apply_study_flags(&mut run, a.prompt, a.seeds);
    run.config.validate()?;
    let model = load_model(&run, &a.model)?;
    let parsed = a.cells.iter().map(|c| parse::cell(c)).collect::<bwla_core::Result<Vec<_>>>()?;
    let mut loaded: BTreeMap<PathBuf, Adapter<f32>> = BTreeMap::new();
    for (_, refs) in &parsed {
        for (p, _) in refs {
            if !loaded.contains_key(p) {
                loaded.insert(p.clone(), load_adapter(&run, p)?);
            }
        }
    }
    let cells: Vec<CellSpec<'_, f32>> = parsed
        .iter()
        .map(|(name, refs)| CellSpec::new(name.clone(), refs.iter().map(|(p, w)| (&loaded[p], *w)).collect()))
        .collect();
    let scorer = run.scorer(model.config().image_size)?;
    let (report, images) = run_combination_study(&model, "combination", &cells, &run.config.study, &scorer, &run.schedule()?)?;
    let out = run.path(&a.out);
    let written = write_study(&out, &report, &images)?;
    run.record(&out.join("run.json"), &run.config)?;
    print_cells(&report);
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn print_cells(report: &bwla_core::eval::FidelityReport) {
    println!("{:<24}{:>10}{:>10}", "cell", "identity", "style");
    for c in &report.cells {
        println!("{:<24}{:>10.4}{:>10.4}", c.name, c.identity_mean, c.style_mean);
    }
}

fn study_blocks(mut run: Run, a: StudyBlocksArgs) -> Result<()> {
    apply_study_flags(&mut run, a.prompt, a.seeds);
    if let Some(s) = a.steps {
        run.config.train.steps = s;
    }
    run.config.validate()?;
    let groups = parse::groups(&a.groups)?;
    let model = load_model(&run, &a.model)?;
    let id_adapter = load_adapter(&run, &a.id_adapter)?;
    let data = TrainDataset::load_dir(&run.path(&a.dataset), run.config.dataset.repeats)?;
    let trigger = match a.trigger.clone().or_else(|| data.trigger().map(str::to_string)) {
        Some(t) => t,
        None => return Err(Error::Config("dataset captions share no trigger; pass --trigger".into()).into()),
    };
    let cfg = &run.config;
    let ablation_cfg = AblationConfig {
        rank: a.rank.unwrap_or(4),
        kind: cfg.policy.kind,
        train: cfg.train.clone(),
        study: cfg.study.clone(),
        ..AblationConfig::default()
    };
    let scorer = run.scorer(model.config().image_size)?;
    let steps = cfg.train.steps;
    let ablation = run_block_group_ablation(
        &model,
        &id_adapter,
        &data,
        &trigger,
        &groups,
        &ablation_cfg,
        &scorer,
        &run.schedule()?,
        |g, s, l| {
            if s % 100 == 0 || s + 1 == steps {
                eprintln!("{g} step {s}/{steps} loss {l:.5}");
            }
        },
    )?;
    let out = run.path(&a.out);
    let written = write_study(&out, &ablation.report, &ablation.images)?;
    for (adapter, training) in ablation.adapters.iter().zip(&ablation.training) {
        let path = out.join(format!("{}.bwla", adapter.name));
        adapter.save(&path)?;
        write_json(&sidecar(&path, ".losses.json"), training)?;
    }
    run.record(&out.join("run.json"), &ablation_cfg)?;
    print_cells(&ablation.report);
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn desk(run: Run, a: DeskArgs) -> Result<()> {
    let mut cfg = DeskConfig {
        seed: run.config.seed,
        ..DeskConfig::default()
    };
    if let Some(s) = a.pretrain_steps {
        cfg.pretrain.steps = s;
    }
    if let Some(s) = a.adapter_steps {
        cfg.id_train.steps = s;
        cfg.style_train.steps = s;
    }
    if let Some(n) = a.seeds {
        cfg.study.seeds = (0..n).collect();
    }
    let outcome = run_desk_experiment(&cfg, |phase, s, l| {
        if s % 100 == 0 {
            eprintln!("{phase} step {s} loss {l:.5}");
        }
    })?;
    let out = run.path(&a.out);
    fs::create_dir_all(&out)?;
    outcome.model.save(&out.join("base.bwla"))?;
    outcome.id_adapter.save(&out.join("id.bwla"))?;
    outcome.style_adapter.save(&out.join("style.bwla"))?;
    let losses: BTreeMap<&str, &TrainReport> = [
        ("pretrain", &outcome.pretrain),
        ("id", &outcome.id_training),
        ("style", &outcome.style_training),
    ]
    .into_iter()
    .collect();
    write_json(&out.join("losses.json"), &losses)?;
    let written = write_study(&out, &outcome.study, &outcome.images)?;
    run.record(&out.join("run.json"), &cfg)?;
    print_cells(&outcome.study);
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

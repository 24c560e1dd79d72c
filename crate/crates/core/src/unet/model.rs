use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{init_embedding, AttnBlock, Block, ConvLayer, Ctx, InitList, LinearLayer, NormLayer, ParamStore, ResBlock};
use super::{BlockId, ConditionEncoder, LayerEntry, UNetConfig};
use crate::adapter::Adapter;
use crate::container::{self, Container, Entry, Metadata};
use crate::error::{Error, Result};
use crate::tensor::{timestep_embedding, Element, Parameter, Tensor};

pub const EMBEDDING_PARAM: &str = "shared.cond.embedding";
pub const BASE_MODEL_KIND: &str = "base-model";

#[derive(Debug)]
pub(crate) struct Architecture {
    time1: LinearLayer,
    time2: LinearLayer,
    /// Per-channel, time-dependent gain on the raw input added to the
    /// output. Normalization layers discard the input's mean level, which
    /// the noise prediction at high noise levels needs.
    input_skip: LinearLayer,
    blocks: Vec<Block>,
}

impl Architecture {
    fn new(cfg: &UNetConfig) -> Self {
        let c = |level: usize| cfg.channels(level);
        let (temb, groups, n) = (cfg.time_embed_dim, cfg.norm_groups, cfg.resblocks_per_block);
        let res_stack = |id: BlockId, first_in: usize, out: usize| -> Vec<ResBlock> {
            (0..n)
                .map(|i| ResBlock::new(&format!("{id}.res{i}"), if i == 0 { first_in } else { out }, out, temb, groups))
                .collect()
        };
        let attn = |id: BlockId, ch: usize| {
            cfg.attention_blocks
                .contains(&id)
                .then(|| AttnBlock::new(id, ch, cfg.cond_dim, groups))
        };
        let mut blocks = Vec::with_capacity(9);
        for level in 0..4 {
            let id = BlockId::in_block(level).expect("level < 4");
            let c_in = if level == 0 { c(0) } else { c(level - 1) };
            blocks.push(Block {
                id,
                stem: (level == 0).then(|| ConvLayer::new("IN0.conv_in", cfg.in_channels, c(0), 3, 1, false)),
                res: res_stack(id, c_in, c(level)),
                attn: attn(id, c(level)),
                down: (level < 3).then(|| ConvLayer::new(format!("{id}.down"), c(level), c(level), 3, 2, true)),
                up: None,
                head: None,
            });
        }
        blocks.push(Block {
            id: BlockId::Mid,
            stem: None,
            res: res_stack(BlockId::Mid, c(3), c(3)),
            attn: attn(BlockId::Mid, c(3)),
            down: None,
            up: None,
            head: None,
        });
        for j in 0..4 {
            let id = BlockId::out_block(j).expect("j < 4");
            let level = 3 - j;
            let from_below = if j == 0 { c(3) } else { c(level + 1) };
            blocks.push(Block {
                id,
                stem: None,
                res: res_stack(id, from_below + c(level), c(level)),
                attn: attn(id, c(level)),
                down: None,
                up: (j < 3).then(|| ConvLayer::new(format!("{id}.up"), c(level), c(level), 3, 1, true)),
                head: (j == 3).then(|| {
                    (
                        NormLayer::new("OUT3.norm_out", c(0), groups),
                        ConvLayer::new("OUT3.conv_out", c(0), cfg.in_channels, 3, 1, false),
                    )
                }),
            });
        }
        Architecture {
            time1: LinearLayer::new("shared.time.lin1", cfg.base_channels, temb, true, false),
            time2: LinearLayer::new("shared.time.lin2", temb, temb, true, false),
            input_skip: LinearLayer::new("shared.time.skip", temb, cfg.in_channels, true, false),
            blocks,
        }
    }

    fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.index()]
    }
}

/// Condition embeddings for a caption batch.
#[derive(Debug, Clone)]
pub struct Conditioning<T: Element = f32> {
    /// `[batch, max_tokens, cond_dim]`.
    pub emb: Tensor<T>,
    pub unconditional: Vec<bool>,
}

impl<T: Element> Conditioning<T> {
    pub fn batch(&self) -> usize {
        self.unconditional.len()
    }

    /// Stacks two conditionings along the batch axis.
    pub fn concat(&self, other: &Conditioning<T>) -> Result<Conditioning<T>> {
        let mut unconditional = self.unconditional.clone();
        unconditional.extend(&other.unconditional);
        Ok(Conditioning {
            emb: Tensor::concat_batch(&[&self.emb, &other.emb])?,
            unconditional,
        })
    }
}

/// Input, skip input and output of one block during a forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace<T: Element = f32> {
    pub block: BlockId,
    pub input: Tensor<T>,
    pub skip: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

/// The denoising U-Net. Weights are kept in a name-keyed store; adapters
/// are either passed per call or attached as persistent hooks.
#[derive(Debug, Clone)]
pub struct UNet<T: Element = f32> {
    config: UNetConfig,
    arch: Arc<Architecture>,
    encoder: ConditionEncoder,
    params: ParamStore<T>,
    lineage: String,
    attached: Vec<(Adapter<T>, f64)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over names, shapes and f32 little-endian values of every
/// parameter, in name order.
pub(crate) fn fingerprint_params<T: Element>(params: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(p.data().len() * 4);
        for v in p.data() {
            (v.as_f64() as f32).write_le(&mut buf);
        }
        h.update(&buf);
    }
    format!("sha256:{}", hex(&h.finalize()))
}

impl UNet<f32> {
    /// Builds a model with weights drawn deterministically from `seed`.
    pub fn build(config: UNetConfig, encoder: ConditionEncoder, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init: InitList = Vec::new();
        arch.time1.init(&mut rng, &mut init);
        arch.time2.init(&mut rng, &mut init);
        arch.input_skip.init_zero(&mut init);
        init.push((
            EMBEDDING_PARAM.to_string(),
            init_embedding(&mut rng, encoder.vocab_size(), config.cond_dim),
            vec![encoder.vocab_size(), config.cond_dim],
        ));
        for b in &arch.blocks {
            b.init(&mut rng, &mut init);
        }
        let mut params = ParamStore::new();
        for (name, data, shape) in init {
            let p = Parameter::new(name.clone(), data, &shape, false)?;
            if params.insert(name.clone(), p).is_some() {
                return Err(Error::State(format!("duplicate parameter path '{name}'")));
            }
        }
        let lineage = fingerprint_params(&params);
        Ok(UNet {
            config,
            arch: Arc::new(arch),
            encoder,
            params,
            lineage,
            attached: Vec::new(),
        })
    }
}

impl<T: Element> UNet<T> {
    pub fn cast<U: Element>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            arch: self.arch.clone(),
            encoder: self.encoder.clone(),
            params: self.params.iter().map(|(k, p)| (k.clone(), p.cast())).collect(),
            lineage: self.lineage.clone(),
            attached: self.attached.iter().map(|(a, w)| (a.cast(), *w)).collect(),
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ConditionEncoder {
        &self.encoder
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Marks every base weight trainable or frozen (frozen is the default).
    pub fn set_base_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.set_trainable(trainable);
        }
    }

    /// Fingerprint of the weights the model was built or loaded with.
    /// Merging adapters keeps it, so adapters trained on the original base
    /// stay compatible with merged descendants.
    pub fn base_fingerprint(&self) -> &str {
        &self.lineage
    }

    /// Fingerprint of the current weights.
    pub fn fingerprint(&self) -> String {
        fingerprint_params(&self.params)
    }

    /// Declares the current weights to be a new base (after pretraining).
    pub fn rebase(&mut self) {
        self.lineage = self.fingerprint();
    }

    /// Every attention projection and adaptable conv, in forward order.
    pub fn list_adaptable_layers(&self) -> Vec<LayerEntry> {
        let mut out = Vec::new();
        for b in &self.arch.blocks {
            b.entries(&mut out);
        }
        out
    }

    pub fn encode_condition(&self, captions: &[&str]) -> Result<Conditioning<T>> {
        let enc = self.encoder.encode(captions, self.config.max_tokens);
        let table = &self.params[EMBEDDING_PARAM].tensor;
        let emb = table
            .embedding(&enc.ids)?
            .reshape(&[captions.len(), self.config.max_tokens, self.config.cond_dim])?;
        Ok(Conditioning {
            emb,
            unconditional: enc.unconditional,
        })
    }

    fn check_inputs(&self, x: &Tensor<T>, t: &[f64], cond: &Conditioning<T>) -> Result<()> {
        let s = self.config.image_size;
        let want = [x.shape().first().copied().unwrap_or(0), self.config.in_channels, s, s];
        if x.shape().len() != 4 || x.shape() != want || want[0] == 0 {
            return Err(Error::contract(format!(
                "predict_noise expects input [B, {}, {s}, {s}], got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        if t.len() != want[0] {
            return Err(Error::contract(format!("{} timesteps for batch of {}", t.len(), want[0])));
        }
        if let Some(bad) = t.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::contract(format!("invalid timestep {bad}")));
        }
        let expect_cond = [want[0], self.config.max_tokens, self.config.cond_dim];
        if cond.emb.shape() != expect_cond {
            return Err(Error::contract(format!(
                "condition shape {:?}, expected {expect_cond:?}",
                cond.emb.shape()
            )));
        }
        Ok(())
    }

    fn check_adapters(&self, adapters: &[(&Adapter<T>, f64)]) -> Result<()> {
        for (a, _) in adapters {
            if a.base_model_fingerprint != self.lineage {
                return Err(Error::Compatibility(format!(
                    "adapter '{}' was trained on {}, model is {}",
                    a.name, a.base_model_fingerprint, self.lineage
                )));
            }
        }
        Ok(())
    }

    fn time_features(&self, ctx_params: &ParamStore<T>, t: &[f64]) -> Result<Tensor<T>> {
        let ctx = Ctx {
            params: ctx_params,
            adapters: &[],
            temb: &Tensor::zeros(&[0]),
            cond: &Tensor::zeros(&[0]),
        };
        let emb = timestep_embedding::<T>(t, self.config.base_channels)?;
        let h = self.arch.time1.forward(&ctx, &emb)?.silu()?;
        self.arch.time2.forward(&ctx, &h)?.silu()
    }

    fn run(
        &self,
        x: &Tensor<T>,
        t: &[f64],
        cond: &Conditioning<T>,
        adapters: &[(&Adapter<T>, f64)],
        mut trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Tensor<T>> {
        self.check_inputs(x, t, cond)?;
        self.check_adapters(adapters)?;
        let temb = self.time_features(&self.params, t)?;
        let ctx = Ctx {
            params: &self.params,
            adapters,
            temb: &temb,
            cond: &cond.emb,
        };
        let mut skips: [Option<Tensor<T>>; 4] = Default::default();
        let mut h = x.clone();
        for block in &self.arch.blocks {
            let skip_in = match block.id.skip_partner() {
                Some(p) if block.id > BlockId::Mid => {
                    Some(skips[p.level()].take().expect("IN blocks run before their OUT partners"))
                }
                _ => None,
            };
            let (out, skip_out) = block.forward(&ctx, &h, skip_in.as_ref())?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(BlockTrace {
                    block: block.id,
                    input: h.clone(),
                    skip: skip_in.clone(),
                    output: out.clone(),
                });
            }
            if let Some(s) = skip_out {
                skips[block.id.level()] = Some(s);
            }
            h = out;
        }
        let s = self.config.image_size;
        let gate = self.arch.input_skip.forward(&ctx, &temb)?.expand_spatial(s, s)?;
        h = h.add(&gate.mul(x)?)?;
        if !h.all_finite() {
            return Err(Error::NonFinite {
                op: "predict_noise".into(),
            });
        }
        Ok(h)
    }

    /// Noise prediction with an explicit set of active adapters. Attached
    /// adapters are ignored.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: &[f64],
        cond: &Conditioning<T>,
        adapters: &[(&Adapter<T>, f64)],
    ) -> Result<Tensor<T>> {
        self.run(x, t, cond, adapters, None)
    }

    /// Noise prediction with the attached adapters active.
    pub fn predict_noise(&self, x: &Tensor<T>, t: &[f64], cond: &Conditioning<T>) -> Result<Tensor<T>> {
        let active = self.active();
        self.forward(x, t, cond, &active)
    }

    /// Attached adapters with their strengths, in attachment order.
    pub fn active(&self) -> Vec<(&Adapter<T>, f64)> {
        self.attached.iter().map(|(a, w)| (a, *w)).collect()
    }

    /// Forward pass that also records every block's input and output.
    pub fn trace(
        &self,
        x: &Tensor<T>,
        t: &[f64],
        cond: &Conditioning<T>,
        adapters: &[(&Adapter<T>, f64)],
    ) -> Result<(Tensor<T>, Vec<BlockTrace<T>>)> {
        let mut tr = Vec::with_capacity(9);
        let out = self.run(x, t, cond, adapters, Some(&mut tr))?;
        Ok((out, tr))
    }

    /// Runs a single block on the given activations.
    pub fn run_block(
        &self,
        block: BlockId,
        input: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        t: &[f64],
        cond: &Conditioning<T>,
        adapters: &[(&Adapter<T>, f64)],
    ) -> Result<Tensor<T>> {
        self.check_adapters(adapters)?;
        let temb = self.time_features(&self.params, t)?;
        let ctx = Ctx {
            params: &self.params,
            adapters,
            temb: &temb,
            cond: &cond.emb,
        };
        Ok(self.arch.block(block).forward(&ctx, input, skip)?.0)
    }

    /// Attaches an adapter as a persistent hook.
    pub fn attach(&mut self, adapter: Adapter<T>, strength: f64) -> Result<()> {
        if adapter.base_model_fingerprint != self.lineage {
            return Err(Error::Compatibility(format!(
                "adapter '{}' was trained on {}, model is {}",
                adapter.name, adapter.base_model_fingerprint, self.lineage
            )));
        }
        if self.attached.iter().any(|(a, _)| a.name == adapter.name) {
            return Err(Error::State(format!("adapter '{}' is already attached", adapter.name)));
        }
        self.attached.push((adapter, strength));
        Ok(())
    }

    pub fn detach(&mut self, name: &str) -> Result<Adapter<T>> {
        let pos = self
            .attached
            .iter()
            .position(|(a, _)| a.name == name)
            .ok_or_else(|| Error::State(format!("adapter '{name}' is not attached")))?;
        Ok(self.attached.remove(pos).0)
    }

    pub fn is_attached(&self, name: &str) -> bool {
        self.attached.iter().any(|(a, _)| a.name == name)
    }

    pub fn set_strength(&mut self, name: &str, strength: f64) -> Result<()> {
        let slot = self
            .attached
            .iter_mut()
            .find(|(a, _)| a.name == name)
            .ok_or_else(|| Error::State(format!("adapter '{name}' is not attached")))?;
        slot.1 = strength;
        Ok(())
    }

    /// Copy without attached adapters.
    pub(crate) fn without_hooks(&self) -> UNet<T> {
        UNet {
            attached: Vec::new(),
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("unet_config".into(), serde_json::to_value(&self.config)?);
        extra.insert("vocabulary".into(), serde_json::to_value(&self.encoder)?);
        extra.insert("content_fingerprint".into(), self.fingerprint().into());
        let meta = Metadata {
            name: "base".into(),
            kind: BASE_MODEL_KIND.into(),
            trigger_token: String::new(),
            base_model_fingerprint: self.lineage.clone(),
            alpha: Default::default(),
            ranks: Default::default(),
            tensors: vec![],
            extra,
        };
        let entries: Vec<Entry<'_, T>> = self
            .params
            .values()
            .map(|p| Entry {
                path: p.name.clone(),
                role: "param",
                tensor: &p.tensor,
            })
            .collect();
        container::write(path, meta, &entries)
    }

    pub fn load(path: &Path) -> Result<UNet<T>> {
        let c = Container::read(path)?;
        Self::from_container(&c)
    }

    pub(crate) fn from_container(c: &Container) -> Result<UNet<T>> {
        let bad = |msg: String| Error::Format { offset: 16, msg };
        if c.meta.kind != BASE_MODEL_KIND {
            return Err(bad(format!("expected kind '{BASE_MODEL_KIND}', found '{}'", c.meta.kind)));
        }
        let field = |key: &str| c.meta.extra.get(key).cloned().ok_or_else(|| bad(format!("missing '{key}'")));
        let config: UNetConfig = serde_json::from_value(field("unet_config")?)?;
        let encoder: ConditionEncoder = serde_json::from_value(field("vocabulary")?)?;
        config.validate()?;
        // Build a skeleton to learn the expected parameter set and shapes.
        let skeleton = UNet::<f32>::build(config.clone(), encoder.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, p) in &skeleton.params {
            let rec = c
                .find(name, "param")
                .ok_or_else(|| bad(format!("checkpoint lacks parameter '{name}'")))?;
            if rec.shape != p.shape() {
                return Err(bad(format!("parameter '{name}' has shape {:?}, expected {:?}", rec.shape, p.shape())));
            }
            let t: Tensor<T> = c.tensor(rec);
            params.insert(name.clone(), Parameter::new(name.clone(), t.to_vec(), &rec.shape, false)?);
        }
        if c.meta.tensors.len() != params.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model expects {}",
                c.meta.tensors.len(),
                params.len()
            )));
        }
        Ok(UNet {
            config,
            arch: skeleton.arch,
            encoder,
            params,
            lineage: c.meta.base_model_fingerprint.clone(),
            attached: Vec::new(),
        })
    }
}

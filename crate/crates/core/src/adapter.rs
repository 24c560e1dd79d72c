//! Low-rank adapters (LoRA for attention projections, LoCon for convs) with
//! a per-block rank policy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, Container, Entry, Metadata};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Element, Parameter, Tensor};
use crate::unet::{BlockId, LayerEntry, LayerKind, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// Attention projections only.
    Lora,
    /// Attention projections and convolutions.
    Locon,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Locon => "locon",
        }
    }

    pub fn adapts(self, kind: LayerKind) -> bool {
        matches!((self, kind), (_, LayerKind::AttentionLinear) | (AdapterKind::Locon, LayerKind::Conv))
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "locon" => Ok(AdapterKind::Locon),
            _ => Err(Error::Config(format!("unknown adapter kind '{s}' (expected lora or locon)"))),
        }
    }
}

/// Rank and scale per block. Blocks missing from `ranks` have rank 0;
/// blocks missing from `alpha` use `alpha = rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRankPolicy {
    pub ranks: BTreeMap<BlockId, usize>,
    #[serde(default)]
    pub alpha: BTreeMap<BlockId, f64>,
    pub kind: AdapterKind,
}

impl BlockRankPolicy {
    /// Same rank in every block.
    pub fn full(rank: usize, kind: AdapterKind) -> Self {
        Self::only(&BlockId::ALL, rank, kind)
    }

    /// `rank` in the listed blocks, 0 elsewhere.
    pub fn only(blocks: &[BlockId], rank: usize, kind: AdapterKind) -> Self {
        BlockRankPolicy {
            ranks: BlockId::ALL
                .iter()
                .map(|b| (*b, if blocks.contains(b) { rank } else { 0 }))
                .collect(),
            alpha: BTreeMap::new(),
            kind,
        }
    }

    pub fn rank(&self, block: BlockId) -> usize {
        self.ranks.get(&block).copied().unwrap_or(0)
    }

    pub fn alpha(&self, block: BlockId) -> f64 {
        self.alpha.get(&block).copied().unwrap_or(self.rank(block) as f64)
    }

    /// Blocks with nonzero rank.
    pub fn active_blocks(&self) -> BTreeSet<BlockId> {
        BlockId::ALL.into_iter().filter(|b| self.rank(*b) > 0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (b, a) in &self.alpha {
            if !(a.is_finite() && *a > 0.0) {
                return Err(Error::contract(format!("alpha for {b} must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

/// Low-rank factors for one layer.
///
/// Linear (`W: [d, k]`): `A: [r, k]` is applied first, then `B: [d, r]`.
/// Conv (`W: [c_out, c_in, kh, kw]`): `B: [r, c_in, kh, kw]` is applied first
/// as a full conv, then `A: [c_out, r, 1, 1]` as a pointwise conv.
#[derive(Debug, Clone)]
pub struct LayerAdapter<T: Element = f32> {
    pub path: String,
    pub block: BlockId,
    pub kind: LayerKind,
    pub rank: usize,
    pub alpha: f64,
    pub a: Parameter<T>,
    pub b: Parameter<T>,
    pub target_shape: Vec<usize>,
}

impl<T: Element> LayerAdapter<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.tensor.numel() + self.b.tensor.numel()
    }

    /// `w·(α/r)·B A x` for `x: [n, k]`.
    pub fn forward_linear(&self, x: &Tensor<T>, strength: f64) -> Result<Tensor<T>> {
        if self.kind != LayerKind::AttentionLinear {
            return Err(Error::contract(format!("'{}' is not a linear adapter", self.path)));
        }
        x.linear(&self.a.tensor, None)?
            .linear(&self.b.tensor, None)?
            .scale(strength * self.scale())
    }

    /// Conv analogue: k×k conv by `B` then 1×1 conv by `A`, scaled.
    pub fn forward_conv(&self, x: &Tensor<T>, strength: f64, stride: usize, pad: usize) -> Result<Tensor<T>> {
        if self.kind != LayerKind::Conv {
            return Err(Error::contract(format!("'{}' is not a conv adapter", self.path)));
        }
        x.conv2d(&self.b.tensor, None, stride, pad)?
            .conv2d(&self.a.tensor, None, 1, 0)?
            .scale(strength * self.scale())
    }

    /// Dense weight update with the target layer's weight shape.
    pub fn effective_delta(&self, strength: f64) -> Tensor<T> {
        let s = strength * self.scale();
        let r = self.rank;
        let (a, b) = (self.a.data(), self.b.data());
        let shape = &self.target_shape;
        let mut out = vec![T::zero(); shape.iter().product()];
        match self.kind {
            LayerKind::AttentionLinear => {
                let (d, k) = (shape[0], shape[1]);
                for i in 0..d {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for p in 0..r {
                            acc += b[i * r + p].as_f64() * a[p * k + j].as_f64();
                        }
                        out[i * k + j] = T::from_f64(s * acc);
                    }
                }
            }
            LayerKind::Conv => {
                let c_out = shape[0];
                let inner: usize = shape[1..].iter().product();
                for o in 0..c_out {
                    for i in 0..inner {
                        let mut acc = 0.0;
                        for p in 0..r {
                            acc += a[o * r + p].as_f64() * b[p * inner + i].as_f64();
                        }
                        out[o * inner + i] = T::from_f64(s * acc);
                    }
                }
            }
        }
        Tensor::new(out, shape).expect("shape product matches")
    }

    fn cast<U: Element>(&self) -> LayerAdapter<U> {
        LayerAdapter {
            path: self.path.clone(),
            block: self.block,
            kind: self.kind,
            rank: self.rank,
            alpha: self.alpha,
            a: self.a.cast(),
            b: self.b.cast(),
            target_shape: self.target_shape.clone(),
        }
    }
}

fn factor_shapes(entry: &LayerEntry, rank: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let w = &entry.weight_shape;
    let limit = match entry.kind {
        LayerKind::AttentionLinear => w[0].min(w[1]),
        LayerKind::Conv => (w[1] * w[2] * w[3]).min(w[0]),
    };
    if rank >= limit {
        return Err(Error::contract(format!(
            "rank {rank} for '{}' must be below {limit} (weight shape {w:?})",
            entry.path
        )));
    }
    Ok(match entry.kind {
        LayerKind::AttentionLinear => (vec![rank, w[1]], vec![w[0], rank]),
        LayerKind::Conv => (vec![w[0], rank, 1, 1], vec![rank, w[1], w[2], w[3]]),
    })
}

/// A named set of layer adapters tied to a base model.
#[derive(Debug, Clone)]
pub struct Adapter<T: Element = f32> {
    pub name: String,
    pub policy: BlockRankPolicy,
    pub trigger_token: String,
    pub base_model_fingerprint: String,
    layers: Vec<LayerAdapter<T>>,
    index: HashMap<String, usize>,
}


impl<T: Element> Adapter<T> {
    fn from_layers(
        name: String,
        policy: BlockRankPolicy,
        trigger_token: String,
        base_model_fingerprint: String,
        layers: Vec<LayerAdapter<T>>,
    ) -> Self {
        let index = layers.iter().enumerate().map(|(i, l)| (l.path.clone(), i)).collect();
        Adapter {
            name,
            policy,
            trigger_token,
            base_model_fingerprint,
            layers,
            index,
        }
    }

    pub fn layers(&self) -> &[LayerAdapter<T>] {
        &self.layers
    }

    pub fn layer(&self, path: &str) -> Option<&LayerAdapter<T>> {
        self.index.get(path).map(|&i| &self.layers[i])
    }

    pub fn layers_mut(&mut self) -> &mut [LayerAdapter<T>] {
        &mut self.layers
    }

    /// All factor parameters, A before B per layer.
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]).collect()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| [&l.a, &l.b])
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.set_trainable(trainable);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerAdapter::num_params).sum()
    }

    /// Blocks that actually carry factors.
    pub fn blocks(&self) -> BTreeSet<BlockId> {
        self.layers.iter().map(|l| l.block).collect()
    }

    /// Content hash over every factor's path, shape and f32 values, in the
    /// same form as the model fingerprint.
    pub fn fingerprint(&self) -> String {
        let store = self
            .layers
            .iter()
            .flat_map(|l| [(format!("{}.A", l.path), l.a.clone()), (format!("{}.B", l.path), l.b.clone())])
            .collect();
        crate::unet::fingerprint_params(&store)
    }

    /// True if every B factor is exactly zero.
    pub fn is_untrained(&self) -> bool {
        self.layers.iter().all(|l| l.b.data().iter().all(|v| *v == T::zero()))
    }

    pub fn cast<U: Element>(&self) -> Adapter<U> {
        Adapter::from_layers(
            self.name.clone(),
            self.policy.clone(),
            self.trigger_token.clone(),
            self.base_model_fingerprint.clone(),
            self.layers.iter().map(LayerAdapter::cast).collect(),
        )
    }

    /// Copy keeping only the layers of `keep`; ranks elsewhere become 0.
    pub fn filter_blocks(&self, keep: &BTreeSet<BlockId>) -> Adapter<T> {
        let mut policy = self.policy.clone();
        for (b, r) in policy.ranks.iter_mut() {
            if !keep.contains(b) {
                *r = 0;
            }
        }
        policy.alpha.retain(|b, _| keep.contains(b));
        Adapter::from_layers(
            self.name.clone(),
            policy,
            self.trigger_token.clone(),
            self.base_model_fingerprint.clone(),
            self.layers.iter().filter(|l| keep.contains(&l.block)).cloned().collect(),
        )
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            name: self.name.clone(),
            kind: self.policy.kind.as_str().into(),
            trigger_token: self.trigger_token.clone(),
            base_model_fingerprint: self.base_model_fingerprint.clone(),
            alpha: BlockId::ALL
                .iter()
                .filter(|b| self.policy.rank(**b) > 0)
                .map(|b| (b.to_string(), self.policy.alpha(*b)))
                .collect(),
            ranks: BlockId::ALL.iter().map(|b| (b.to_string(), self.policy.rank(*b))).collect(),
            tensors: vec![],
            extra: Default::default(),
        };
        let mut entries = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            entries.push(Entry {
                path: l.path.clone(),
                role: "A",
                tensor: &l.a.tensor,
            });
            entries.push(Entry {
                path: l.path.clone(),
                role: "B",
                tensor: &l.b.tensor,
            });
        }
        container::encode(meta, &entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Adapter<T>> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Adapter<T>> {
        Self::from_container(&Container::parse(bytes)?)
    }

    fn from_container(c: &Container) -> Result<Adapter<T>> {
        let bad = |msg: String| Error::Format { offset: 16, msg };
        let kind: AdapterKind = c.meta.kind.parse().map_err(|_| bad(format!("not an adapter (kind '{}')", c.meta.kind)))?;
        let mut policy = BlockRankPolicy {
            ranks: BTreeMap::new(),
            alpha: BTreeMap::new(),
            kind,
        };
        for (b, r) in &c.meta.ranks {
            policy.ranks.insert(b.parse().map_err(|e: Error| bad(e.to_string()))?, *r);
        }
        for (b, a) in &c.meta.alpha {
            let block: BlockId = b.parse().map_err(|e: Error| bad(e.to_string()))?;
            if *a != policy.rank(block) as f64 {
                policy.alpha.insert(block, *a);
            }
        }
        let mut layers = Vec::new();
        let mut seen = BTreeSet::new();
        for rec in &c.meta.tensors {
            if !seen.insert(rec.path.clone()) {
                continue;
            }
            let a_rec = c.find(&rec.path, "A").ok_or_else(|| bad(format!("'{}' lacks factor A", rec.path)))?;
            let b_rec = c.find(&rec.path, "B").ok_or_else(|| bad(format!("'{}' lacks factor B", rec.path)))?;
            let block = BlockId::from_path(&rec.path).ok_or_else(|| bad(format!("bad layer path '{}'", rec.path)))?;
            let (kind, rank, target_shape) = match (a_rec.shape.as_slice(), b_rec.shape.as_slice()) {
                ([r, k], [d, r2]) if r == r2 => (LayerKind::AttentionLinear, *r, vec![*d, *k]),
                ([co, r, 1, 1], [r2, ci, kh, kw]) if r == r2 => (LayerKind::Conv, *r, vec![*co, *ci, *kh, *kw]),
                (a, b) => return Err(bad(format!("inconsistent factor shapes {a:?} / {b:?} for '{}'", rec.path))),
            };
            if rank != policy.rank(block) {
                return Err(bad(format!("'{}' has rank {rank} but block {block} declares {}", rec.path, policy.rank(block))));
            }
            let to_param = |role: &str, r: &crate::container::TensorRecord| -> Result<Parameter<T>> {
                let t: Tensor<T> = c.tensor(r);
                Parameter::new(format!("{}.{role}", rec.path), t.to_vec(), &r.shape, false)
            };
            layers.push(LayerAdapter {
                path: rec.path.clone(),
                block,
                kind,
                rank,
                alpha: policy.alpha(block),
                a: to_param("A", a_rec)?,
                b: to_param("B", b_rec)?,
                target_shape,
            });
        }
        Ok(Adapter::from_layers(
            c.meta.name.clone(),
            policy,
            c.meta.trigger_token.clone(),
            c.meta.base_model_fingerprint.clone(),
            layers,
        ))
    }
}

/// Allocates factors for every adaptable layer selected by `policy`:
/// A ~ N(0, (1/r)^2) and B = 0, so the adapted model starts exactly at the
/// base model. Factors are drawn in f32 and converted, so f32 and f64
/// adapters from the same seed agree.
pub fn inject<T: Element>(
    model: &UNet<T>,
    name: &str,
    policy: &BlockRankPolicy,
    trigger_token: &str,
    seed: u64,
) -> Result<Adapter<T>> {
    policy.validate()?;
    if model.is_attached(name) {
        return Err(Error::State(format!("adapter '{name}' is already injected into this model")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for entry in model.list_adaptable_layers() {
        let rank = policy.rank(entry.block);
        if rank == 0 || !policy.kind.adapts(entry.kind) {
            continue;
        }
        let (a_shape, b_shape) = factor_shapes(&entry, rank)?;
        let std = 1.0 / rank as f64;
        let a: Vec<T> = (0..a_shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64((z * std) as f32 as f64)
            })
            .collect();
        let b = vec![T::zero(); b_shape.iter().product()];
        layers.push(LayerAdapter {
            a: Parameter::new(format!("{}.A", entry.path), a, &a_shape, true)?,
            b: Parameter::new(format!("{}.B", entry.path), b, &b_shape, true)?,
            path: entry.path,
            block: entry.block,
            kind: entry.kind,
            rank,
            alpha: policy.alpha(entry.block),
            target_shape: entry.weight_shape,
        });
    }
    Ok(Adapter::from_layers(
        name.to_string(),
        policy.clone(),
        trigger_token.to_string(),
        model.base_fingerprint().to_string(),
        layers,
    ))
}

/// `W0 x + Σ wᵢ (αᵢ/rᵢ) Bᵢ Aᵢ x` for a single linear layer `W0: [d, k]`,
/// `x: [n, k]`.
pub fn adapted_forward<T: Element>(
    w0: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    x: &Tensor<T>,
    active: &[(&LayerAdapter<T>, f64)],
) -> Result<Tensor<T>> {
    let mut h = x.linear(w0, bias)?;
    for (layer, w) in active {
        if layer.target_shape != w0.shape() {
            return Err(Error::contract(format!(
                "adapter for '{}' targets {:?}, layer weight is {:?}",
                layer.path,
                layer.target_shape,
                w0.shape()
            )));
        }
        h = h.add(&layer.forward_linear(x, *w)?)?;
    }
    Ok(h)
}

/// Conv counterpart of [`adapted_forward`].
pub fn adapted_conv_forward<T: Element>(
    w0: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    x: &Tensor<T>,
    stride: usize,
    pad: usize,
    active: &[(&LayerAdapter<T>, f64)],
) -> Result<Tensor<T>> {
    let mut h = x.conv2d(w0, bias, stride, pad)?;
    for (layer, w) in active {
        if layer.target_shape != w0.shape() {
            return Err(Error::contract(format!(
                "adapter for '{}' targets {:?}, layer weight is {:?}",
                layer.path,
                layer.target_shape,
                w0.shape()
            )));
        }
        h = h.add(&layer.forward_conv(x, *w, stride, pad)?)?;
    }
    Ok(h)
}

/// Returns a model whose targeted weights are `W0 + effective_delta`, with
/// no adapter hooks.
pub fn merge<T: Element>(model: &UNet<T>, adapter: &Adapter<T>, strength: f64) -> Result<UNet<T>> {
    if adapter.base_model_fingerprint != model.base_fingerprint() {
        return Err(Error::Compatibility(format!(
            "adapter '{}' was trained on {}, model is {}",
            adapter.name,
            adapter.base_model_fingerprint,
            model.base_fingerprint()
        )));
    }
    let mut merged = model.without_hooks();
    if strength == 0.0 {
        return Ok(merged);
    }
    no_grad(|| -> Result<()> {
        let params = merged.params_mut();
        for layer in adapter.layers() {
            let name = format!("{}.weight", layer.path);
            let p = params
                .get_mut(&name)
                .ok_or_else(|| Error::Compatibility(format!("model has no layer '{}'", layer.path)))?;
            if p.shape() != layer.target_shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "'{}' weight is {:?}, adapter expects {:?}",
                    layer.path,
                    p.shape(),
                    layer.target_shape
                )));
            }
            let delta = layer.effective_delta(strength);
            let data = p.data().iter().zip(delta.data()).map(|(w, d)| *w + *d).collect();
            p.set_data(data)?;
        }
        Ok(())
    })?;
    Ok(merged)
}

//! Layer descriptors. Weights live in the model's parameter store, keyed by
//! `"{path}.weight"` / `"{path}.bias"`; the descriptors only know shapes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BlockId, LayerEntry, LayerKind};
use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::tensor::{scaled_dot_product_attention, Element, Parameter, Tensor};

pub(crate) type ParamStore<T> = BTreeMap<String, Parameter<T>>;

/// Freshly initialized parameter values, in creation order.
pub(crate) type InitList = Vec<(String, Vec<f32>, Vec<usize>)>;

pub(crate) struct Ctx<'a, T: Element> {
    pub params: &'a ParamStore<T>,
    pub adapters: &'a [(&'a Adapter<T>, f64)],
    /// SiLU of the time embedding, `[batch, time_embed_dim]`.
    pub temb: &'a Tensor<T>,
    /// Condition embeddings `[batch, tokens, cond_dim]`.
    pub cond: &'a Tensor<T>,
}

impl<T: Element> Ctx<'_, T> {
    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::State(format!("missing parameter '{name}'")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
}

#[derive(Debug, Clone)]
pub(crate) struct LinearLayer {
    pub path: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    pub adaptable: bool,
}

impl LinearLayer {
    pub fn new(path: impl Into<String>, fan_in: usize, fan_out: usize, bias: bool, adaptable: bool) -> Self {
        LinearLayer {
            path: path.into(),
            fan_in,
            fan_out,
            bias,
            adaptable,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        out.push((
            format!("{}.weight", self.path),
            uniform(rng, self.fan_out * self.fan_in, bound),
            vec![self.fan_out, self.fan_in],
        ));
        if self.bias {
            out.push((format!("{}.bias", self.path), uniform(rng, self.fan_out, bound), vec![self.fan_out]));
        }
    }

    /// Zero weights and bias, so the layer starts as a no-op contribution.
    pub fn init_zero(&self, out: &mut InitList) {
        out.push((
            format!("{}.weight", self.path),
            vec![0.0; self.fan_out * self.fan_in],
            vec![self.fan_out, self.fan_in],
        ));
        if self.bias {
            out.push((format!("{}.bias", self.path), vec![0.0; self.fan_out], vec![self.fan_out]));
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = ctx.param(&format!("{}.weight", self.path))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.path))?)
        } else {
            None
        };
        let mut h = x.linear(w, b)?;
        if self.adaptable {
            for (adapter, strength) in ctx.adapters {
                if *strength == 0.0 {
                    continue;
                }
                if let Some(layer) = adapter.layer(&self.path) {
                    h = h.add(&layer.forward_linear(x, *strength)?)?;
                }
            }
        }
        Ok(h)
    }

    pub fn entry(&self) -> Option<LayerEntry> {
        self.adaptable.then(|| LayerEntry {
            path: self.path.clone(),
            block: BlockId::from_path(&self.path).expect("layer paths start with a block id"),
            kind: LayerKind::AttentionLinear,
            weight_shape: vec![self.fan_out, self.fan_in],
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub adaptable: bool,
}

impl ConvLayer {
    pub fn new(path: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, adaptable: bool) -> Self {
        ConvLayer {
            path: path.into(),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
            adaptable,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.push((
            format!("{}.weight", self.path),
            uniform(rng, self.c_out * fan_in, bound),
            vec![self.c_out, self.c_in, self.kernel, self.kernel],
        ));
        out.push((format!("{}.bias", self.path), uniform(rng, self.c_out, bound), vec![self.c_out]));
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = ctx.param(&format!("{}.weight", self.path))?;
        let b = ctx.param(&format!("{}.bias", self.path))?;
        let mut h = x.conv2d(w, Some(b), self.stride, self.pad)?;
        if self.adaptable {
            for (adapter, strength) in ctx.adapters {
                if *strength == 0.0 {
                    continue;
                }
                if let Some(layer) = adapter.layer(&self.path) {
                    h = h.add(&layer.forward_conv(x, *strength, self.stride, self.pad)?)?;
                }
            }
        }
        Ok(h)
    }

    pub fn entry(&self) -> Option<LayerEntry> {
        self.adaptable.then(|| LayerEntry {
            path: self.path.clone(),
            block: BlockId::from_path(&self.path).expect("layer paths start with a block id"),
            kind: LayerKind::Conv,
            weight_shape: vec![self.c_out, self.c_in, self.kernel, self.kernel],
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormLayer {
    pub path: String,
    pub channels: usize,
    pub groups: usize,
}

impl NormLayer {
    pub fn new(path: impl Into<String>, channels: usize, groups: usize) -> Self {
        NormLayer {
            path: path.into(),
            channels,
            groups,
        }
    }

    pub fn init(&self, out: &mut InitList) {
        out.push((format!("{}.weight", self.path), vec![1.0; self.channels], vec![self.channels]));
        out.push((format!("{}.bias", self.path), vec![0.0; self.channels], vec![self.channels]));
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gamma = ctx.param(&format!("{}.weight", self.path))?;
        let beta = ctx.param(&format!("{}.bias", self.path))?;
        x.group_norm(self.groups, gamma, beta, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub norm1: NormLayer,
    pub conv1: ConvLayer,
    pub temb: LinearLayer,
    pub norm2: NormLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl ResBlock {
    pub fn new(path: &str, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: NormLayer::new(format!("{path}.norm1"), c_in, groups),
            conv1: ConvLayer::new(format!("{path}.conv1"), c_in, c_out, 3, 1, true),
            temb: LinearLayer::new(format!("{path}.temb"), temb_dim, c_out, true, false),
            norm2: NormLayer::new(format!("{path}.norm2"), c_out, groups),
            conv2: ConvLayer::new(format!("{path}.conv2"), c_out, c_out, 3, 1, true),
            shortcut: (c_in != c_out).then(|| ConvLayer::new(format!("{path}.skip"), c_in, c_out, 1, 1, false)),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        self.norm1.init(out);
        self.conv1.init(rng, out);
        self.temb.init(rng, out);
        self.norm2.init(out);
        self.conv2.init(rng, out);
        if let Some(s) = &self.shortcut {
            s.init(rng, out);
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut hid = self.conv1.forward(ctx, &self.norm1.forward(ctx, x)?.silu()?)?;
        let t = self.temb.forward(ctx, ctx.temb)?.expand_spatial(h, w)?;
        hid = hid.add(&t)?;
        hid = self.conv2.forward(ctx, &self.norm2.forward(ctx, &hid)?.silu()?)?;
        let residual = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        hid.add(&residual)
    }

    pub fn entries(&self, out: &mut Vec<LayerEntry>) {
        out.extend(self.conv1.entry());
        out.extend(self.conv2.entry());
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Projections {
    pub to_q: LinearLayer,
    pub to_k: LinearLayer,
    pub to_v: LinearLayer,
    pub to_out: LinearLayer,
}

impl Projections {
    fn new(path: &str, channels: usize, context_dim: usize) -> Self {
        Projections {
            to_q: LinearLayer::new(format!("{path}.to_q"), channels, channels, false, true),
            to_k: LinearLayer::new(format!("{path}.to_k"), context_dim, channels, false, true),
            to_v: LinearLayer::new(format!("{path}.to_v"), context_dim, channels, false, true),
            to_out: LinearLayer::new(format!("{path}.to_out"), channels, channels, true, true),
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        for l in [&self.to_q, &self.to_k, &self.to_v, &self.to_out] {
            l.init(rng, out);
        }
    }

    fn entries(&self, out: &mut Vec<LayerEntry>) {
        for l in [&self.to_q, &self.to_k, &self.to_v, &self.to_out] {
            out.extend(l.entry());
        }
    }

    /// `tokens: [b, n, c]`, `context: [b, m, d]` -> `[b, n, c]`.
    fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, tokens: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let (m, d) = (context.shape()[1], context.shape()[2]);
        let flat = tokens.reshape(&[b * n, c])?;
        let ctx_flat = context.reshape(&[b * m, d])?;
        let q = self.to_q.forward(ctx, &flat)?.reshape(&[b, n, c])?;
        let k = self.to_k.forward(ctx, &ctx_flat)?.reshape(&[b, m, c])?;
        let v = self.to_v.forward(ctx, &ctx_flat)?.reshape(&[b, m, c])?;
        let attended = scaled_dot_product_attention(&q, &k, &v)?.reshape(&[b * n, c])?;
        self.to_out.forward(ctx, &attended)?.reshape(&[b, n, c])
    }
}

/// Self-attention over feature positions followed by cross-attention to the
/// condition tokens, both residual.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    pub norm1: NormLayer,
    pub attn1: Projections,
    pub norm2: NormLayer,
    pub attn2: Projections,
}

impl AttnBlock {
    pub fn new(block: BlockId, channels: usize, cond_dim: usize, groups: usize) -> Self {
        AttnBlock {
            norm1: NormLayer::new(format!("{block}.attn1.norm"), channels, groups),
            attn1: Projections::new(&format!("{block}.attn1"), channels, channels),
            norm2: NormLayer::new(format!("{block}.attn2.norm"), channels, groups),
            attn2: Projections::new(&format!("{block}.attn2"), channels, cond_dim),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        self.norm1.init(out);
        self.attn1.init(rng, out);
        self.norm2.init(out);
        self.attn2.init(rng, out);
    }

    pub fn entries(&self, out: &mut Vec<LayerEntry>) {
        self.attn1.entries(out);
        self.attn2.entries(out);
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let to_tokens = |t: &Tensor<T>| -> Result<Tensor<T>> { t.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c]) };
        let to_map = |t: &Tensor<T>| -> Result<Tensor<T>> { t.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2]) };

        let tokens = to_tokens(&self.norm1.forward(ctx, x)?)?;
        let x = x.add(&to_map(&self.attn1.forward(ctx, &tokens, &tokens)?)?)?;
        let tokens = to_tokens(&self.norm2.forward(ctx, &x)?)?;
        if ctx.cond.shape()[0] != b {
            return Err(Error::shape("cross-attention", ctx.cond.shape(), &s));
        }
        x.add(&to_map(&self.attn2.forward(ctx, &tokens, ctx.cond)?)?)
    }
}

/// One of the nine U-Net segments.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub id: BlockId,
    /// Input projection from image channels (IN0 only).
    pub stem: Option<ConvLayer>,
    pub res: Vec<ResBlock>,
    pub attn: Option<AttnBlock>,
    /// Stride-2 conv after the resblocks (IN0..IN2).
    pub down: Option<ConvLayer>,
    /// Nearest 2x upsample followed by this conv (OUT0..OUT2).
    pub up: Option<ConvLayer>,
    /// Output normalization and projection to image channels (OUT3 only).
    pub head: Option<(NormLayer, ConvLayer)>,
}

impl Block {
    pub fn init(&self, rng: &mut ChaCha8Rng, out: &mut InitList) {
        if let Some(s) = &self.stem {
            s.init(rng, out);
        }
        for (i, r) in self.res.iter().enumerate() {
            r.init(rng, out);
            if i == 0 {
                if let Some(a) = &self.attn {
                    a.init(rng, out);
                }
            }
        }
        for c in [&self.down, &self.up].into_iter().flatten() {
            c.init(rng, out);
        }
        if let Some((n, c)) = &self.head {
            n.init(out);
            c.init(rng, out);
        }
    }

    pub fn entries(&self, out: &mut Vec<LayerEntry>) {
        for (i, r) in self.res.iter().enumerate() {
            r.entries(out);
            if i == 0 {
                if let Some(a) = &self.attn {
                    a.entries(out);
                }
            }
        }
        for c in [&self.down, &self.up].into_iter().flatten() {
            out.extend(c.entry());
        }
    }

    /// Runs the block. `skip` is the paired IN activation for OUT blocks.
    /// Returns the block output and, for IN blocks, the activation handed to
    /// the paired OUT block.
    pub fn forward<T: Element>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut h = match &self.stem {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        if let Some(s) = skip {
            h = h.concat_channels(s)?;
        }
        for (i, r) in self.res.iter().enumerate() {
            h = r.forward(ctx, &h)?;
            if i == 0 {
                if let Some(a) = &self.attn {
                    h = a.forward(ctx, &h)?;
                }
            }
        }
        let mut skip_out = None;
        if matches!(self.id, BlockId::In0 | BlockId::In1 | BlockId::In2 | BlockId::In3) {
            skip_out = Some(h.clone());
        }
        if let Some(d) = &self.down {
            h = d.forward(ctx, &h)?;
        }
        if let Some(u) = &self.up {
            h = u.forward(ctx, &h.upsample_nearest2x()?)?;
        }
        if let Some((n, c)) = &self.head {
            h = c.forward(ctx, &n.forward(ctx, &h)?.silu()?)?;
        }
        Ok((h, skip_out))
    }
}

pub(crate) fn init_embedding(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    (0..rows * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        })
        .collect()
}

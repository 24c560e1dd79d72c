use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Group normalization over an NCHW tensor with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::shape("group_norm", s, &[groups]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("group_norm(affine)", gamma.shape(), &[c]));
        }
        let cg = c / groups;
        let group_len = cg * hw;
        let count = T::from_f64(group_len as f64);
        let eps = T::from_f64(eps);
        let x = self.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        for (gi, (src, dst)) in x.chunks(group_len).zip(xhat.chunks_mut(group_len)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[gi] = istd;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (*v - mean) * istd;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let mut out = vec![T::zero(); x.len()];
        for (idx, (o, xh)) in out.chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = idx % c;
            for (ov, xv) in o.iter_mut().zip(xh) {
                *ov = *xv * gd[ch] + bd[ch];
            }
        }
        let gamma_c = gamma.clone();
        let need = [self.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
        Tensor::record("group_norm", s.to_vec(), out, &[self, gamma, beta], move |g| {
            let gd = gamma_c.data();
            let dgamma = need[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (idx, (gr, xh)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    d[idx % c] += gr.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
                }
                d
            });
            let dbeta = need[2].then(|| {
                let mut d = vec![T::zero(); c];
                for (idx, gr) in g.chunks(hw).enumerate() {
                    d[idx % c] += gr.iter().copied().sum::<T>();
                }
                d
            });
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                for gi in 0..n * groups {
                    let base = gi * group_len;
                    let first_ch = (gi % groups) * cg;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..group_len {
                        let dxh = g[base + j] * gd[first_ch + j / hw];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[base + j];
                    }
                    let mean_d = sum_d / count;
                    let mean_dx = sum_dx / count;
                    for j in 0..group_len {
                        let dxh = g[base + j] * gd[first_ch + j / hw];
                        dx[base + j] = inv_std[gi] * (dxh - mean_d - xhat[base + j] * mean_dx);
                    }
                }
                dx
            });
            vec![dx, dgamma, dbeta]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::shape("softmax", s, &[]))?;
        if d == 0 {
            return Err(Error::shape("softmax", s, &[]));
        }
        let mut out = vec![T::zero(); self.numel()];
        for (src, dst) in self.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (*v - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
        let y = out.clone();
        Tensor::record("softmax", s.to_vec(), out, &[self], move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>();
                for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = *yv * (*gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Row lookup into an embedding table `[vocab, dim]`. `None` ids yield
    /// zero rows (padding).
    pub fn embedding(&self, ids: &[Option<usize>]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[2]));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!("embedding id {bad} out of range for vocab {vocab}")));
        }
        let mut out = vec![T::zero(); ids.len() * dim];
        for (row, id) in out.chunks_mut(dim).zip(ids) {
            if let Some(i) = id {
                row.copy_from_slice(&self.data()[i * dim..(i + 1) * dim]);
            }
        }
        let ids = ids.to_vec();
        Tensor::record("embedding", vec![ids.len(), dim], out, &[self], move |g| {
            let mut d = vec![T::zero(); vocab * dim];
            for (row, id) in g.chunks(dim).zip(&ids) {
                if let Some(i) = id {
                    for (acc, v) in d[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                        *acc += *v;
                    }
                }
            }
            vec![Some(d)]
        })
    }
}

/// `softmax(Q K^T / sqrt(d)) V` over full sequences, for `q: [b, n, d]`,
/// `k, v: [b, m, d]`.
pub fn scaled_dot_product_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *q.shape().last().ok_or_else(|| Error::shape("attention", q.shape(), k.shape()))?;
    if k.shape().last() != Some(&d) || k.shape() != v.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let scores = q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt())?;
    scores.softmax_last()?.bmm(v, false)
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[len, dim]`.
/// The first half of each row holds sines, the second half cosines.
pub fn timestep_embedding<T: Element>(timesteps: &[f64], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!("timestep embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        out.extend(args.iter().map(|a| T::from_f64(a.sin())));
        out.extend(args.iter().map(|a| T::from_f64(a.cos())));
    }
    Tensor::new(out, &[timesteps.len(), dim])
}

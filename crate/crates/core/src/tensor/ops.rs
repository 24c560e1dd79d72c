use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

fn check_same(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], dims: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_same("add", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a + *b).collect();
        Tensor::record("add", self.shape().to_vec(), out, &[self, rhs], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_same("sub", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a - *b).collect();
        Tensor::record("sub", self.shape().to_vec(), out, &[self, rhs], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_same("mul", self, rhs)?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a * *b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::record("mul", self.shape().to_vec(), out, &[self, rhs], move |g| {
            let da = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(g, b)| *g * *b).collect());
            let db = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(g, a)| *g * *a).collect());
            vec![da, db]
        })
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::from_f64(s);
        let out = self.data().iter().map(|v| *v * s).collect();
        Tensor::record("scale", self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().map(|v| *v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::from_f64(s);
        let out = self.data().iter().map(|v| *v + s).collect();
        Tensor::record("add_scalar", self.shape().to_vec(), out, &[self], |g| vec![Some(g.to_vec())])
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::record("sum", vec![], vec![total], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let inv = T::one() / T::from_f64(n as f64);
        let total: T = self.data().iter().copied().sum();
        Tensor::record("mean", vec![], vec![total * inv], &[self], move |g| vec![Some(vec![g[0] * inv; n])])
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        check_same("mse", self, target)?;
        let n = self.numel();
        if n == 0 {
            return Err(Error::contract("mse of empty tensor"));
        }
        let diff: Vec<T> = self.data().iter().zip(target.data()).map(|(a, b)| *a - *b).collect();
        let inv = T::one() / T::from_f64(n as f64);
        let loss = diff.iter().map(|d| *d * *d).sum::<T>() * inv;
        let (need_a, need_b) = (self.requires_grad(), target.requires_grad());
        Tensor::record("mse", vec![], vec![loss], &[self, target], move |g| {
            let k = g[0] * T::from_f64(2.0) * inv;
            let da: Vec<T> = diff.iter().map(|d| *d * k).collect();
            let db = need_b.then(|| da.iter().map(|v| -*v).collect());
            vec![need_a.then_some(da), db]
        })
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        let sig: Vec<T> = self.data().iter().map(|x| T::one() / (T::one() + (-*x).exp())).collect();
        let out = self.data().iter().zip(&sig).map(|(x, s)| *x * *s).collect();
        let x = self.clone();
        Tensor::record("silu", self.shape().to_vec(), out, &[self], move |g| {
            let d = g
                .iter()
                .zip(x.data())
                .zip(&sig)
                .map(|((g, x), s)| *g * *s * (T::one() + *x * (T::one() - *s)))
                .collect();
            vec![Some(d)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Tensor::record("reshape", shape.to_vec(), self.to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::shape("permute", self.shape(), dims));
        }
        let (out, out_shape) = permute_data(self.data(), self.shape(), dims);
        let mut inverse = vec![0; rank];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let grad_shape = out_shape.clone();
        Tensor::record("permute", out_shape, out, &[self], move |g| {
            vec![Some(permute_data(g, &grad_shape, &inverse).0)]
        })
    }

    /// Concatenates two NCHW tensors along channels.
    pub fn concat_channels(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&rhs.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        Tensor::record("concat_channels", vec![n, ca + cb, sa[2], sa[3]], out, &[self, rhs], move |g| {
            let mut da = Vec::with_capacity(n * ca * hw);
            let mut db = Vec::with_capacity(n * cb * hw);
            for chunk in g.chunks((ca + cb) * hw) {
                da.extend_from_slice(&chunk[..ca * hw]);
                db.extend_from_slice(&chunk[ca * hw..]);
            }
            vec![Some(da), Some(db)]
        })
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_batch of no tensors"))?;
        let inner = &first.shape()[1..];
        let mut batch = 0;
        let mut out = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != inner {
                return Err(Error::shape("concat_batch", first.shape(), p.shape()));
            }
            batch += p.shape()[0];
            sizes.push(p.numel());
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(inner);
        Tensor::record("concat_batch", shape, out, parts, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = g[offset..offset + len].to_vec();
                    offset += len;
                    Some(part)
                })
                .collect()
        })
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape("narrow_batch", shape, &[start, len]));
        }
        let row = self.numel() / shape[0].max(1);
        let out = self.data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let total = self.numel();
        Tensor::record("narrow_batch", out_shape, out, &[self], move |g| {
            let mut d = vec![T::zero(); total];
            d[start * row..(start + len) * row].copy_from_slice(g);
            vec![Some(d)]
        })
    }

    /// Broadcasts `[n, c]` to `[n, c, h, w]` by repeating over space.
    pub fn expand_spatial(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("expand_spatial", s, &[h, w]));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(self.numel() * hw);
        for v in self.data() {
            out.extend(std::iter::repeat_n(*v, hw));
        }
        Tensor::record("expand_spatial", vec![s[0], s[1], h, w], out, &[self], move |g| {
            vec![Some(g.chunks(hw).map(|c| c.iter().copied().sum()).collect())]
        })
    }
}

use rayon::prelude::*;

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D convolution (cross-correlation) over NCHW input with zero padding.
    ///
    /// `weight` is `[c_out, c_in, kh, kw]`, `bias` is `[c_out]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("conv2d(bias)", b.shape(), &[o]));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (patch, ohw) = (geom.patch(), geom.out_hw());
        let in_size = c * h * w;
        let wdata = weight.data();
        let bdata = bias.map(|b| b.data());
        let xdata = self.data();

        let mut out = vec![T::zero(); n * o * ohw];
        out.par_chunks_mut(o * ohw).enumerate().for_each(|(i, dst)| {
            let xi = &xdata[i * in_size..(i + 1) * in_size];
            if let Some(b) = bdata {
                for (row, bv) in dst.chunks_mut(ohw).zip(b) {
                    row.fill(*bv);
                }
            }
            let beta = if bdata.is_some() { T::one() } else { T::zero() };
            if geom.is_pointwise() {
                gemm(o, ohw, patch, wdata, false, xi, false, dst, beta);
            } else {
                let mut cols = vec![T::zero(); patch * ohw];
                im2col(xi, &geom, &mut cols);
                gemm(o, ohw, patch, wdata, false, &cols, false, dst, beta);
            }
        });

        let x = self.clone();
        let wt = weight.clone();
        let need = [self.requires_grad(), weight.requires_grad(), bias.is_some_and(|b| b.requires_grad())];
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::record("conv2d", vec![n, o, geom.ho, geom.wo], out, &inputs, move |g| {
            let xdata = x.data();
            let wdata = wt.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * in_size];
                dx.par_chunks_mut(in_size).enumerate().for_each(|(i, dst)| {
                    let gi = &g[i * o * ohw..(i + 1) * o * ohw];
                    if geom.is_pointwise() {
                        gemm(patch, ohw, o, wdata, true, gi, false, dst, T::zero());
                    } else {
                        let mut cols = vec![T::zero(); patch * ohw];
                        gemm(patch, ohw, o, wdata, true, gi, false, &mut cols, T::zero());
                        col2im(&cols, &geom, dst);
                    }
                });
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); o * patch];
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * ohw] };
                for i in 0..n {
                    let gi = &g[i * o * ohw..(i + 1) * o * ohw];
                    let xi = &xdata[i * in_size..(i + 1) * in_size];
                    let beta = if i == 0 { T::zero() } else { T::one() };
                    if geom.is_pointwise() {
                        gemm(o, patch, ohw, gi, false, xi, true, &mut dw, beta);
                    } else {
                        im2col(xi, &geom, &mut cols);
                        gemm(o, patch, ohw, gi, false, &cols, true, &mut dw, beta);
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for gi in g.chunks(o * ohw) {
                        for (acc, row) in db.iter_mut().zip(gi.chunks(ohw)) {
                            *acc += row.iter().copied().sum::<T>();
                        }
                    }
                    db
                }));
            }
            grads
        })
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest2x", s, &[4]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); planes * h2 * w2];
        for (src, dst) in self.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Tensor::record("upsample_nearest2x", vec![s[0], s[1], h2, w2], out, &[self], move |g| {
            let mut d = vec![T::zero(); planes * h * w];
            for (src, dst) in g.chunks(h2 * w2).zip(d.chunks_mut(h * w)) {
                for y in 0..h2 {
                    for x in 0..w2 {
                        dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                    }
                }
            }
            vec![Some(d)]
        })
    }
}

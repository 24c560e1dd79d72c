use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Row-major `C = op(A) op(B) + beta * C`, where `op` optionally transposes.
///
/// `op(A)` is `m×k`, `op(B)` is `k×n`. With `trans_a` the buffer `a` holds a
/// `k×m` matrix; with `trans_b` the buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds are asserted above and `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

impl<T: Element> Tensor<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, n, k, self.data(), false, rhs.data(), false, &mut out, T::zero());
        let (a, b) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        Tensor::record("matmul", vec![m, n], out, &[self, rhs], move |g| {
            let da = need_a.then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(m, k, n, g, false, b.data(), true, &mut d, T::zero());
                d
            });
            let db = need_b.then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(k, n, m, a.data(), true, g, false, &mut d, T::zero());
                d
            });
            vec![da, db]
        })
    }

    /// Affine map `x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (rows, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = bias {
            if b.shape() != [fan_out] {
                return Err(Error::shape("linear(bias)", b.shape(), &[fan_out]));
            }
        }
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = bias {
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(rows, fan_out, fan_in, self.data(), false, weight.data(), true, &mut out, beta);

        let x = self.clone();
        let w = weight.clone();
        let need = [self.requires_grad(), weight.requires_grad(), bias.is_some_and(|b| b.requires_grad())];
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::record("linear", vec![rows, fan_out], out, &inputs, move |g| {
            let dx = need[0].then(|| {
                let mut d = vec![T::zero(); rows * fan_in];
                gemm(rows, fan_in, fan_out, g, false, w.data(), false, &mut d, T::zero());
                d
            });
            let dw = need[1].then(|| {
                let mut d = vec![T::zero(); fan_out * fan_in];
                gemm(fan_out, fan_in, rows, g, true, x.data(), false, &mut d, T::zero());
                d
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut d = vec![T::zero(); fan_out];
                    for row in g.chunks(fan_out) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    d
                }));
            }
            grads
        })
    }

    /// Batched matmul `[b,m,k] x [b,k,n] -> [b,m,n]`; with `trans_rhs` the
    /// right operand is `[b,n,k]` and is transposed per batch.
    pub fn bmm(&self, rhs: &Tensor<T>, trans_rhs: bool) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_rhs { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                n,
                k,
                &self.data()[bi * m * k..],
                false,
                &rhs.data()[bi * k * n..],
                trans_rhs,
                &mut out[bi * m * n..(bi + 1) * m * n],
                T::zero(),
            );
        }
        let (a, b) = (self.clone(), rhs.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        Tensor::record("bmm", vec![batch, m, n], out, &[self, rhs], move |g| {
            let da = need_a.then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    // dA = dC op(B)^T
                    gemm(
                        m,
                        k,
                        n,
                        &g[bi * m * n..],
                        false,
                        &b.data()[bi * k * n..],
                        !trans_rhs,
                        &mut d[bi * m * k..(bi + 1) * m * k],
                        T::zero(),
                    );
                }
                d
            });
            let db = need_b.then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let dst = &mut d[bi * k * n..(bi + 1) * k * n];
                    if trans_rhs {
                        // dB [n,k] = dC^T A
                        gemm(n, k, m, &g[bi * m * n..], true, &a.data()[bi * m * k..], false, dst, T::zero());
                    } else {
                        // dB [k,n] = A^T dC
                        gemm(k, n, m, &a.data()[bi * m * k..], true, &g[bi * m * n..], false, dst, T::zero());
                    }
                }
                d
            });
            vec![da, db]
        })
    }
}

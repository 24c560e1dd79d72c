//! Helpers shared by the integration tests: small models, randomized
//! adapters and brute-force reference implementations.
#![allow(dead_code)]

use bwla_core::data::synth;
use bwla_core::{Adapter, Element, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 16×16 images and 8 base channels: every block and layer kind, at a size
/// that keeps f64 finite differences cheap.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        image_size: 16,
        base_channels: 8,
        ..UNetConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> UNet<f32> {
    UNet::build(tiny_config(), synth::vocabulary(), seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// Overwrites every B factor (and rescales nothing else) with N(0, std²).
pub fn randomize_b<T: Element>(adapter: &mut Adapter<T>, std: f64, seed: u64) {
    let mut r = rng(seed);
    for l in adapter.layers_mut() {
        let data = randn(l.b.data().len(), std, &mut r).into_iter().map(T::from_f64).collect();
        l.b.set_data(data).unwrap();
    }
}

/// `y[n, d] = x[n, k] · w[d, k]ᵀ + bias`, by explicit loops.
pub fn naive_linear(x: &[f64], n: usize, k: usize, w: &[f64], d: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        for o in 0..d {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for j in 0..k {
                acc += x[i * k + j] * w[o * k + j];
            }
            y[i * d + o] = acc;
        }
    }
    y
}

/// Direct cross-correlation with zero padding, `x: [n, c, h, w]`,
/// `w: [o, c, kh, kw]`. Returns the output and its shape.
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, [n, o, oh, ow])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

mod common;

use bwla_core::tensor::{grad_check, scaled_dot_product_attention};
use bwla_core::{Parameter, Tensor};
use common::*;
use proptest::prelude::*;

fn p(name: &str, data: Vec<f64>, shape: &[usize]) -> Parameter<f64> {
    Parameter::new(name, data, shape, true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3,
        extra_h in 0usize..5, extra_w in 0usize..5,
    ) {
        let (h, w) = (k + extra_h, k + extra_w);
        let mut r = rng(seed);
        let xs = [n, c, h, w];
        let ws = [o, c, k, k];
        let x = randn(xs.iter().product(), 1.0, &mut r);
        let wt = randn(ws.iter().product(), 1.0, &mut r);
        let b = randn(o, 1.0, &mut r);
        let (want, shape) = naive_conv(&x, xs, &wt, ws, Some(&b), stride, pad);
        let got = Tensor::new(x, &xs).unwrap()
            .conv2d(&Tensor::new(wt, &ws).unwrap(), Some(&Tensor::new(b, &[o]).unwrap()), stride, pad)
            .unwrap();
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }

    #[test]
    fn linear_matches_direct_loops(seed in any::<u64>(), n in 1usize..6, k in 1usize..12, d in 1usize..12) {
        let mut r = rng(seed);
        let x = randn(n * k, 1.0, &mut r);
        let w = randn(d * k, 1.0, &mut r);
        let b = randn(d, 1.0, &mut r);
        let want = naive_linear(&x, n, k, &w, d, Some(&b));
        let got = Tensor::new(x, &[n, k]).unwrap()
            .linear(&Tensor::new(w, &[d, k]).unwrap(), Some(&Tensor::new(b, &[d]).unwrap()))
            .unwrap();
        prop_assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }

    #[test]
    fn f32_conv_tracks_f64(seed in any::<u64>(), c in 1usize..5, o in 1usize..5) {
        let mut r = rng(seed);
        let xs = [1, c, 6, 6];
        let ws = [o, c, 3, 3];
        let x = randn(xs.iter().product(), 1.0, &mut r);
        let w = randn(ws.iter().product(), 1.0, &mut r);
        let hi = Tensor::new(x.clone(), &xs).unwrap().conv2d(&Tensor::new(w.clone(), &ws).unwrap(), None, 1, 1).unwrap();
        let lo = Tensor::new(x, &xs).unwrap().cast::<f32>()
            .conv2d(&Tensor::new(w, &ws).unwrap().cast::<f32>(), None, 1, 1)
            .unwrap();
        let lo: Vec<f64> = lo.data().iter().map(|v| *v as f64).collect();
        prop_assert!(max_abs_diff(hi.data(), &lo) < 1e-4);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let x = Tensor::new(randn(rows * cols, scale, &mut r), &[rows, cols]).unwrap();
        let s = x.softmax_last().unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let mut r = rng(1);
    let params = [
        p("x", randn(2 * 3 * 5 * 5, 1.0, &mut r), &[2, 3, 5, 5]),
        p("w", randn(4 * 3 * 3 * 3, 1.0, &mut r), &[4, 3, 3, 3]),
        p("b", randn(4, 1.0, &mut r), &[4]),
    ];
    let target = Tensor::new(randn(2 * 4 * 3 * 3, 1.0, &mut r), &[2, 4, 3, 3]).unwrap();
    let err = grad_check(|t| t[0].conv2d(&t[1], Some(&t[2]), 2, 1)?.mse(&target), &params, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn group_norm_silu_gradients() {
    let mut r = rng(2);
    let params = [
        p("x", randn(2 * 4 * 3 * 3, 1.0, &mut r), &[2, 4, 3, 3]),
        p("g", randn(4, 1.0, &mut r), &[4]),
        p("b", randn(4, 1.0, &mut r), &[4]),
    ];
    let target = Tensor::new(randn(2 * 4 * 3 * 3, 1.0, &mut r), &[2, 4, 3, 3]).unwrap();
    let err = grad_check(|t| t[0].group_norm(2, &t[1], &t[2], 1e-5)?.silu()?.mse(&target), &params, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_gradients() {
    let mut r = rng(3);
    let params = [
        p("q", randn(2 * 5 * 4, 1.0, &mut r), &[2, 5, 4]),
        p("k", randn(2 * 3 * 4, 1.0, &mut r), &[2, 3, 4]),
        p("v", randn(2 * 3 * 4, 1.0, &mut r), &[2, 3, 4]),
    ];
    let target = Tensor::new(randn(2 * 5 * 4, 1.0, &mut r), &[2, 5, 4]).unwrap();
    let err = grad_check(|t| scaled_dot_product_attention(&t[0], &t[1], &t[2])?.mse(&target), &params, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reshape_permute_upsample_gradients() {
    let mut r = rng(4);
    let params = [p("x", randn(2 * 3 * 2 * 2, 1.0, &mut r), &[2, 3, 2, 2])];
    let weights = Tensor::new(randn(2 * 4 * 4 * 3, 1.0, &mut r), &[2, 4, 4, 3]).unwrap();
    let f = |t: &[Tensor<f64>]| {
        t[0].upsample_nearest2x()?
            .permute(&[0, 2, 3, 1])?
            .mul(&weights)?
            .reshape(&[96])?
            .sum()
    };
    let err = grad_check(f, &params, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn matmul_and_bmm_gradients() {
    let mut r = rng(5);
    let params = [
        p("a", randn(3 * 4, 1.0, &mut r), &[3, 4]),
        p("b", randn(4 * 2, 1.0, &mut r), &[4, 2]),
        p("c", randn(2 * 3 * 4, 1.0, &mut r), &[2, 3, 4]),
        p("d", randn(2 * 5 * 4, 1.0, &mut r), &[2, 5, 4]),
    ];
    let f = |t: &[Tensor<f64>]| {
        let m = t[0].matmul(&t[1])?.silu()?.mean()?;
        let bm = t[2].bmm(&t[3], true)?.silu()?.mean()?;
        m.add(&bm)
    };
    let err = grad_check(f, &params, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

use bwla_bench::{filled, model_and_adapter};
use bwla_core::adapter::adapted_forward;
use bwla_core::sampler::{dpmpp_2m, karras_sigmas, sample};
use bwla_core::{merge, NoiseSchedule, SamplerConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for ch in [32usize, 64, 128] {
        let x = filled::<f32>(&[2, ch, 16, 16], 1);
        let w = filled::<f32>(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| x.conv2d(black_box(&w), None, 1, 1).unwrap())
        });
    }
    g.finish();
}

fn linear(c: &mut Criterion) {
    let x = filled::<f32>(&[256, 128], 3);
    let w = filled::<f32>(&[128, 128], 4);
    let (_, adapter) = model_and_adapter(8).unwrap();
    let layer = adapter.layers().iter().find(|l| l.target_shape.len() == 2).unwrap();
    let w0 = filled::<f32>(&layer.target_shape, 5);
    let xi = filled::<f32>(&[64, layer.target_shape[1]], 6);
    c.bench_function("linear_256x128x128", |b| b.iter(|| x.linear(black_box(&w), None).unwrap()));
    c.bench_function("adapted_linear_rank8", |b| {
        b.iter(|| adapted_forward(&w0, None, black_box(&xi), &[(layer, 1.0)]).unwrap())
    });
}

fn unet(c: &mut Criterion) {
    let (model, adapter) = model_and_adapter(4).unwrap();
    let x = filled::<f32>(&[2, 3, 32, 32], 7);
    let cond = model.encode_condition(&["<char>, figure", ""]).unwrap();
    let mut g = c.benchmark_group("unet_forward");
    g.sample_size(20);
    g.bench_function("base", |b| b.iter(|| model.forward(&x, &[500.0, 500.0], &cond, &[]).unwrap()));
    g.bench_function("hooked", |b| {
        b.iter(|| model.forward(&x, &[500.0, 500.0], &cond, &[(&adapter, 1.0)]).unwrap())
    });
    let merged = merge(&model, &adapter, 1.0).unwrap();
    g.bench_function("merged", |b| b.iter(|| merged.forward(&x, &[500.0, 500.0], &cond, &[]).unwrap()));
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let sigmas = karras_sigmas(26, 0.002, 80.0, 7.0).unwrap();
    let x: Vec<f64> = filled::<f64>(&[3 * 32 * 32], 8).data().to_vec();
    c.bench_function("dpmpp_2m_25_steps_identity_denoiser", |b| {
        b.iter(|| dpmpp_2m(x.clone(), &sigmas, |x, _, _| Ok(x.iter().map(|v| v * 0.5).collect())).unwrap())
    });

    let (model, _) = model_and_adapter(4).unwrap();
    let schedule = NoiseSchedule::new(Default::default()).unwrap();
    let cfg = SamplerConfig { steps: 5, ..SamplerConfig::default() };
    let mut g = c.benchmark_group("sample");
    g.sample_size(10);
    g.bench_function("unet_5_steps_cfg", |b| b.iter(|| sample(&model, &[], "<char>", "", &cfg, &schedule).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, linear, unet, sampler);
criterion_main!(benches);

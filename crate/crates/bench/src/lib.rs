//! Fixtures shared by the benchmarks.

use bwla_core::data::synth;
use bwla_core::{inject, Adapter, AdapterKind, BlockRankPolicy, Element, Result, Tensor, UNet, UNetConfig};

/// A deterministic pseudo-random tensor. Values lie in [-1, 1].
pub fn filled<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            T::from_f64((s >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        })
        .collect();
    Tensor::new(data, shape).expect("shape matches data")
}

/// The default 32×32 model plus a LoCon adapter on every block with small
/// nonzero B factors, so the hooked path does real work.
pub fn model_and_adapter(rank: usize) -> Result<(UNet<f32>, Adapter<f32>)> {
    let model = UNet::build(UNetConfig::default(), synth::vocabulary(), 0)?;
    let mut adapter = inject(&model, "bench", &BlockRankPolicy::full(rank, AdapterKind::Locon), "<char>", 1)?;
    for (i, l) in adapter.layers_mut().iter_mut().enumerate() {
        let b = filled::<f32>(l.b.shape(), i as u64);
        let scaled = b.data().iter().map(|v| v * 0.01).collect();
        l.b.set_data(scaled)?;
    }
    Ok((model, adapter))
}

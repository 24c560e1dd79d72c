mod common;

use std::path::{Path, PathBuf};

use bwla_core::container::Container;
use bwla_core::{inject, Adapter, AdapterKind, BlockId, BlockRankPolicy, Error};
use common::*;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden() -> Adapter<f32> {
    let model = tiny_model(2024);
    let policy = BlockRankPolicy::only(&[BlockId::In0, BlockId::Mid, BlockId::Out3], 2, AdapterKind::Locon);
    let mut a = inject(&model, "golden", &policy, "<char>", 7).unwrap();
    randomize_b(&mut a, 0.25, 8);
    a
}

/// Rewrites the golden fixture and its fingerprint. The `.sha256` file is
/// computed separately with `sha256sum`.
#[test]
#[ignore = "regenerates tests/fixtures"]
fn write_golden_fixture() {
    let a = golden();
    a.save(&fixture("golden_adapter.bwla")).unwrap();
    std::fs::write(fixture("golden_adapter.fingerprint"), format!("{}\n", a.fingerprint())).unwrap();
}

#[test]
fn golden_fixture_is_stable() {
    let loaded = Adapter::<f32>::load(&fixture("golden_adapter.bwla")).unwrap();
    let recorded = std::fs::read_to_string(fixture("golden_adapter.fingerprint")).unwrap();
    assert_eq!(loaded.fingerprint(), recorded.trim());
    assert_eq!(loaded.name, "golden");
    assert_eq!(loaded.trigger_token, "<char>");
    let blocks: Vec<_> = loaded.blocks().into_iter().collect();
    assert_eq!(blocks, [BlockId::In0, BlockId::Mid, BlockId::Out3]);
    assert!(loaded.layers().iter().all(|l| l.rank == 2 && l.alpha == 2.0));

    let c = Container::read(&fixture("golden_adapter.bwla")).unwrap();
    assert_eq!(c.meta.kind, "locon");
    assert_eq!(c.meta.ranks.get("IN1"), Some(&0));
    assert_eq!(c.meta.tensors.len(), 2 * loaded.layers().len());
}

#[test]
fn metadata_lists_every_block_rank() {
    let a = golden();
    let c = Container::parse(a.to_bytes().unwrap()).unwrap();
    assert_eq!(c.meta.ranks.len(), 9);
    for b in BlockId::ALL {
        let expected = if a.blocks().contains(&b) { 2 } else { 0 };
        assert_eq!(c.meta.ranks[b.as_str()], expected, "{b}");
    }
    assert_eq!(c.meta.base_model_fingerprint, a.base_model_fingerprint);
}

#[test]
fn filtered_adapter_round_trips() {
    let a = golden();
    let keep = [BlockId::Out3].into_iter().collect();
    let f = a.filter_blocks(&keep);
    let back = Adapter::<f32>::from_bytes(f.to_bytes().unwrap()).unwrap();
    assert_eq!(back.blocks(), keep);
    assert_eq!(back.policy.rank(BlockId::In0), 0);
    assert_eq!(back.fingerprint(), f.fingerprint());
    assert_ne!(back.fingerprint(), a.fingerprint());
}

#[test]
fn f64_adapter_round_trips_exactly() {
    let model = tiny_model(5).cast::<f64>();
    let mut a = inject(&model, "wide", &BlockRankPolicy::full(3, AdapterKind::Lora), "<style>", 1).unwrap();
    randomize_b(&mut a, 1e-3, 2);
    let back = Adapter::<f64>::from_bytes(a.to_bytes().unwrap()).unwrap();
    for (p, q) in a.parameters().zip(back.parameters()) {
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corrupted_bytes_never_panic(pos in any::<usize>(), byte in any::<u8>()) {
        let mut bytes = std::fs::read(fixture("golden_adapter.bwla")).unwrap();
        let i = pos % bytes.len();
        bytes[i] = byte;
        // Any outcome is fine except a panic; payload flips may still parse.
        let _ = Adapter::<f32>::from_bytes(bytes);
    }

    #[test]
    fn truncation_is_a_format_error(cut in any::<usize>()) {
        let bytes = std::fs::read(fixture("golden_adapter.bwla")).unwrap();
        let len = cut % bytes.len();
        let rejected = matches!(Adapter::<f32>::from_bytes(bytes[..len].to_vec()), Err(Error::Format { .. }));
        prop_assert!(rejected, "prefix of {} bytes", len);
    }

    #[test]
    fn random_factors_round_trip(seed in any::<u64>(), std in 1e-6f64..10.0) {
        let mut a = golden();
        randomize_b(&mut a, std, seed);
        let bytes = a.to_bytes().unwrap();
        let back = Adapter::<f32>::from_bytes(bytes.clone()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.fingerprint(), a.fingerprint());
    }
}

use super::*;
use crate::model::{forward, ModelConfig, ModelParams, Params};
use crate::text::BOS;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn tiny() -> ModelParams {
    ModelParams::init(ModelConfig::tiny(), 3).unwrap()
}

/// Adapter with non-zero `B` so its delta is not trivially zero.
fn trained_like(model: &ModelParams, doc: u64, seed: u64) -> LowRankAdapter {
    let mut a = LowRankAdapter::new_random(AdapterConfig::default(), model, doc, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
    for m in &mut a.matrices {
        m.b.iter_mut().for_each(|x| *x = rng.random_range(-0.05..0.05));
    }
    a
}

fn dense_oracle(adapters: &[&LowRankAdapter], idx: usize) -> Vec<f64> {
    let m0 = &adapters[0].matrices[idx];
    let mut out = vec![0.0f64; m0.rows * m0.cols];
    for a in adapters {
        let m = &a.matrices[idx];
        let r = a.config.rank;
        let s = a.config.scale() as f64;
        for i in 0..m.rows {
            for j in 0..m.cols {
                out[i * m.cols + j] += s * (0..r).map(|k| m.a[i * r + k] as f64 * m.b[j * r + k] as f64).sum::<f64>();
            }
        }
    }
    out
}

fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-30);
    got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn fresh_adapter_has_zero_delta() {
    let m = tiny();
    for seed in 0..4 {
        let a = LowRankAdapter::new_random(AdapterConfig::default(), &m, 9, seed).unwrap();
        assert!(a.matrices.iter().all(|x| x.b.iter().all(|&v| v == 0.0)));
        assert!(delta_of(&a).matrices.iter().all(|d| d.data.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn seeding_is_deterministic_and_non_degenerate() {
    let m = tiny();
    let a = LowRankAdapter::new_random(AdapterConfig::default(), &m, 1, 42).unwrap();
    let b = LowRankAdapter::new_random(AdapterConfig::default(), &m, 1, 42).unwrap();
    let c = LowRankAdapter::new_random(AdapterConfig::default(), &m, 1, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.matrices[0].a, c.matrices[0].a);
}

#[test]
fn config_validation() {
    let cfg = ModelConfig::tiny();
    assert!(AdapterConfig { rank: 0, ..Default::default() }.validate(&cfg).is_err());
    assert!(AdapterConfig { rank: 17, ..Default::default() }.validate(&cfg).is_err());
    assert!(AdapterConfig { rank: 16, ..Default::default() }.validate(&cfg).is_ok());
    assert!(AdapterConfig { alpha: 0.0, ..Default::default() }.validate(&cfg).is_err());
    assert_eq!(AdapterConfig::default().scale(), 16.0);
    assert_eq!(AdapterConfig { scaling_mode: ScalingMode::AlphaPlain, ..Default::default() }.scale(), 32.0);
}

fn hand_adapter(a: Vec<f32>, b: Vec<f32>, doc: u64) -> LowRankAdapter {
    LowRankAdapter {
        doc_id: doc,
        model_fingerprint: 77,
        config: AdapterConfig { rank: 1, alpha: 1.0, scaling_mode: ScalingMode::AlphaPlain, normalize_merge: false },
        matrices: vec![AdapterMatrix { layer: 0, target: TargetMatrix::FfnUp, rows: 2, cols: 2, a, b }],
    }
}

#[test]
fn rank_one_outer_product_by_hand() {
    let a = hand_adapter(vec![1.0, 0.0], vec![1.0, 0.0], 1);
    assert_eq!(delta_of(&a).matrices[0].data, vec![1.0, 0.0, 0.0, 0.0]);
    let zero_b = hand_adapter(vec![1.0, 2.0], vec![0.0, 0.0], 1);
    assert_eq!(delta_of(&zero_b).matrices[0].data, vec![0.0; 4]);
}

#[test]
fn mirrored_rank_one_adapters_sum_to_identity() {
    let a = hand_adapter(vec![1.0, 0.0], vec![1.0, 0.0], 1);
    let b = hand_adapter(vec![0.0, 1.0], vec![0.0, 1.0], 2);
    let merged = merge(&[a, b], &AdapterConfig::default()).unwrap();
    assert_eq!(merged.matrices[0].data, vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(merged.source_doc_ids, vec![1, 2]);
}

#[test]
fn delta_matches_dense_fp64_oracle() {
    let m = tiny();
    let a = trained_like(&m, 5, 17);
    let d = delta_of(&a);
    for idx in 0..a.matrices.len() {
        assert!(max_rel_err(&d.matrices[idx].data, &dense_oracle(&[&a], idx)) <= 1e-6);
    }
}

#[test]
fn singleton_merge_equals_delta_bit_exact() {
    let m = tiny();
    let a = trained_like(&m, 5, 1);
    assert_eq!(merge(std::slice::from_ref(&a), &AdapterConfig::default()).unwrap(), delta_of(&a));
}

#[test]
fn three_way_merge_matches_dense_oracle() {
    let m = tiny();
    let xs: Vec<_> = (0..3).map(|i| trained_like(&m, i, 100 + i)).collect();
    let merged = merge(&xs, &AdapterConfig::default()).unwrap();
    let refs: Vec<&LowRankAdapter> = xs.iter().collect();
    for idx in 0..xs[0].matrices.len() {
        assert!(max_rel_err(&merged.matrices[idx].data, &dense_oracle(&refs, idx)) <= 1e-5);
    }
    assert_eq!(merged.source_doc_ids, vec![0, 1, 2]);
}

#[test]
fn normalized_merge_divides_by_count() {
    let m = tiny();
    let xs: Vec<_> = (0..2).map(|i| trained_like(&m, i, 7 + i)).collect();
    let plain = merge(&xs, &AdapterConfig::default()).unwrap();
    let norm = merge(&xs, &AdapterConfig { normalize_merge: true, ..Default::default() }).unwrap();
    for (p, n) in plain.matrices[0].data.iter().zip(&norm.matrices[0].data) {
        assert_eq!(p / 2.0, *n);
    }
}

#[test]
fn merge_errors() {
    let m = tiny();
    let other = ModelParams::init(ModelConfig::tiny(), 4).unwrap();
    assert_eq!(merge(&[], &AdapterConfig::default()).unwrap_err(), AdapterError::EmptyList);
    let a = trained_like(&m, 1, 1);
    let b = trained_like(&other, 2, 2);
    assert!(matches!(merge(&[a.clone(), b], &AdapterConfig::default()), Err(AdapterError::FingerprintMismatch { .. })));
    let c = LowRankAdapter::new_random(AdapterConfig { rank: 3, ..Default::default() }, &m, 3, 3).unwrap();
    assert!(merge(&[a, c], &AdapterConfig::default()).is_ok());
}

#[test]
fn apply_checks_fingerprint_and_never_mutates_base() {
    let m = tiny();
    let before = crate::model::checkpoint::to_bytes(&m);
    let a = trained_like(&m, 1, 1);
    let d = delta_of(&a);
    let w = apply(&m, &d).unwrap();
    let _ = forward(&w, &[BOS, 1, 2]).unwrap();
    let _ = w;
    assert_eq!(crate::model::checkpoint::to_bytes(&m), before);

    let other = ModelParams::init(ModelConfig::tiny(), 99).unwrap();
    assert!(matches!(apply(&other, &d), Err(AdapterError::FingerprintMismatch { .. })));
}

#[test]
fn applied_delta_matches_eager_materialization() {
    let m = tiny();
    let xs: Vec<_> = (0..2).map(|i| trained_like(&m, i, 30 + i)).collect();
    let d = merge(&xs, &AdapterConfig::default()).unwrap();
    let tokens = [BOS, 80, 65, 82, 73, 83];
    let lazy = forward(&apply(&m, &d).unwrap(), &tokens).unwrap();

    let mut eager: Params<f32> = m.params().clone();
    for dm in &d.matrices {
        let ll = &eager.layout.layers[dm.layer as usize];
        let range = match dm.target {
            TargetMatrix::FfnUp => ll.w_up.clone(),
            TargetMatrix::FfnDown => ll.w_down.clone(),
        };
        for (w, dw) in eager.data[range].iter_mut().zip(&dm.data) {
            *w += dw;
        }
    }
    let eager = ModelParams::new(eager);
    let direct = forward(&crate::model::EffectiveWeights::base_only(&eager), &tokens).unwrap();
    for (a, b) in lazy.data.iter().zip(&direct.data) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn zero_delta_generation_matches_base() {
    let m = tiny();
    let fresh = LowRankAdapter::new_random(AdapterConfig::default(), &m, 1, 1).unwrap();
    let d = delta_of(&fresh);
    let prompt = [BOS, 81, 58];
    let base = crate::model::generate_greedy(&crate::model::EffectiveWeights::base_only(&m), &prompt, 8).unwrap();
    let with = crate::model::generate_greedy(&apply(&m, &d).unwrap(), &prompt, 8).unwrap();
    assert_eq!(base, with);
}

#[test]
fn param_count_is_2nr_h_plus_l() {
    let m = ModelParams::init(ModelConfig { n_layers: 3, ..ModelConfig::tiny() }, 1).unwrap();
    for r in 1..=4 {
        let a = LowRankAdapter::new_random(AdapterConfig { rank: r, ..Default::default() }, &m, 0, 0).unwrap();
        assert_eq!(a.param_count(), 2 * 3 * r * (16 + 64));
    }
}

#[test]
fn desk_payload_is_40960_bytes() {
    let cfg = ModelConfig::desk();
    let a = LowRankAdapter::new_random_for(AdapterConfig::default(), &cfg, 1, 2, 3).unwrap();
    assert_eq!(a.tensor_payload_bytes(), 4 * 2 * 2 * (128 + 512) * 4);
    assert_eq!(a.tensor_payload_bytes(), 40_960);
    let bytes = serialize(&a);
    // magic, version, doc, fingerprint, mode, rank, alpha, count, 8 matrix headers, crc
    let overhead = 8 + 4 + 8 + 8 + 1 + 2 + 4 + 4 + 8 * (2 + 1 + 4 + 4) + 4;
    assert_eq!(bytes.len(), overhead + 40_960);
}

#[test]
fn serialize_round_trip_is_idempotent() {
    let m = tiny();
    let a = trained_like(&m, 0xdead_beef, 8);
    let bytes = serialize(&a);
    assert_eq!(&bytes[..8], b"PRAGLORA");
    let back = deserialize(&bytes).unwrap();
    assert_eq!(back, a);
    assert_eq!(serialize(&back), bytes);
}

#[test]
fn corruption_is_detected() {
    let m = tiny();
    let a = trained_like(&m, 1, 8);
    let bytes = serialize(&a);

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(deserialize(&flipped), Err(AdapterError::ChecksumMismatch { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'Q';
    assert_eq!(deserialize(&magic).unwrap_err(), AdapterError::BadMagic);

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert_eq!(deserialize(&version).unwrap_err(), AdapterError::VersionUnsupported(7));

    assert_eq!(deserialize(&bytes[..bytes.len() - 10]).unwrap_err(), AdapterError::TruncatedPayload);
    assert_eq!(deserialize(&bytes[..20]).unwrap_err(), AdapterError::TruncatedPayload);
    assert_eq!(deserialize(b"PRAG").unwrap_err(), AdapterError::BadMagic);
}

#[test]
fn check_shapes_catches_foreign_models() {
    let m = tiny();
    let a = trained_like(&m, 1, 8);
    assert!(a.check_shapes(m.config()).is_ok());
    let bigger = ModelConfig { hidden: 32, ..ModelConfig::tiny() };
    assert!(a.check_shapes(&bigger).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merge_is_linear_over_splits(split in 1usize..4, seed in 0u64..1000) {
        let m = tiny();
        let xs: Vec<_> = (0..4).map(|i| trained_like(&m, i, seed * 10 + i)).collect();
        let whole = merge(&xs, &AdapterConfig::default()).unwrap();
        let left = merge(&xs[..split], &AdapterConfig::default()).unwrap();
        let right = merge(&xs[split..], &AdapterConfig::default()).unwrap();
        for ((w, l), r) in whole.matrices.iter().zip(&left.matrices).zip(&right.matrices) {
            let scale = w.data.iter().fold(0.0f32, |a, x| a.max(x.abs())).max(1e-30);
            for ((a, b), c) in w.data.iter().zip(&l.data).zip(&r.data) {
                prop_assert!(((b + c) - a).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn random_adapters_round_trip(r in 1usize..5, seed in any::<u64>(), doc in any::<u64>(), plain in any::<bool>()) {
        let m = tiny();
        let cfg = AdapterConfig { rank: r, alpha: 8.0, scaling_mode: if plain { ScalingMode::AlphaPlain } else { ScalingMode::AlphaOverR }, normalize_merge: false };
        let mut a = LowRankAdapter::new_random(cfg, &m, doc, seed).unwrap();
        a.matrices[0].b[0] = f32::from_bits(seed as u32 & 0x7f7f_ffff);
        let bytes = serialize(&a);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(serialize(&back), bytes);
        prop_assert_eq!(back.tensor_payload_bytes(), 2 * 2 * r * (16 + 64) * 4);
    }
}

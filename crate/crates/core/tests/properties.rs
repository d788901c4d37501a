mod common;

use common::{max_abs_diff, random, workspace_file};
use metaformer_core::block::drop_path;
use metaformer_core::checkpoint::{decode, decode_model, encode_model};
use metaformer_core::config::presets;
use metaformer_core::train::SynthDataset;
use metaformer_core::{analyze, Error, MixerConfig, Mode, Model, ModelConfig, NormKind, ParamKind, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig::from_path(&workspace_file("configs/tiny.json")).unwrap()
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.store.entries().iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn every_preset_roundtrips_bitwise() {
    for (name, config) in presets() {
        let model = Model::<f32>::build(&config, 9).unwrap();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.config, config, "{name}");
        assert_eq!(bits(&back), bits(&model), "{name}");
        assert_eq!(encode_model(&back), bytes, "{name}");
    }
}

#[test]
fn flipped_magic_and_version_are_format_errors() {
    let bytes = encode_model(&Model::<f32>::build(&tiny(), 0).unwrap());
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(matches!(decode(&bad), Err(Error::Format(_))));
    let mut bad = bytes;
    bad[4] = 2;
    assert!(matches!(decode(&bad), Err(Error::Format(_))));
}

#[test]
fn bn_running_stats_follow_momentum() {
    let mut config = tiny();
    config.norm = NormKind::Bn;
    let mut model = Model::<f32>::build(&config, 4).unwrap();
    let (x, _) = SynthDataset::new(1, config.input_size).batch(0, 8);
    let before = model.clone();
    let (_, updates) = model.run(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(bits(&model), bits(&before), "a forward pass must not touch the store");
    assert!(!updates.is_empty());
    model.apply_bn_updates(&updates);
    for u in &updates {
        let old = before.store.get(u.running_mean).data();
        for ((new, old), b) in model.store.get(u.running_mean).data().iter().zip(old).zip(&u.batch_mean) {
            assert!((new - (0.9 * old + 0.1 * b)).abs() <= 1e-6);
        }
        assert_eq!(model.store.entry(u.running_var).kind, ParamKind::Buffer);
    }
    // eval mode reads the running statistics, so the logits move
    assert_ne!(model.infer(&x).unwrap(), before.infer(&x).unwrap());
}

#[test]
fn eval_is_batch_independent_without_bn() {
    let config = tiny();
    let model = Model::<f32>::build(&config, 2).unwrap();
    let (x, _) = SynthDataset::new(3, config.input_size).batch(0, 3);
    let all = model.infer(&x).unwrap().cast::<f64>();
    let per = 3 * 32 * 32;
    for i in 0..3 {
        let one = Tensor::new([1, 3, 32, 32], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let row = model.infer(&one).unwrap().cast::<f64>();
        let want = Tensor::new([1, 4], all.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
        assert!(max_abs_diff(&row, &want) <= 1e-5);
    }
}

#[test]
fn drop_path_is_per_sample_all_or_nothing() {
    let x = random(&[64, 2, 3, 3], 1).map(|v| v + 2.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = drop_path(&mut t, v, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let (mut kept, mut dropped) = (0, 0);
    for (out, inp) in t.value(y).data().chunks(18).zip(x.data().chunks(18)) {
        if out.iter().all(|&o| o == 0.0) {
            dropped += 1;
        } else {
            kept += 1;
            for (o, i) in out.iter().zip(inp) {
                assert!((o - i / 0.7).abs() <= 1e-12);
            }
        }
    }
    assert!(kept > 0 && dropped > 0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = drop_path(&mut t, v, 0.3, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(t.value(y), &x);
    assert!(drop_path(&mut t, v, 1.0, Mode::Train, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
}

fn mixer_strategy() -> impl Strategy<Value = MixerConfig> {
    prop_oneof![
        (0usize..3).prop_map(|i| MixerConfig::Pooling { pool_size: 2 * i + 1 }),
        Just(MixerConfig::Identity),
        Just(MixerConfig::RandomMatrix),
        Just(MixerConfig::DepthwiseConv { kernel: 3 }),
        Just(MixerConfig::Attention { heads: Some(2) }),
        Just(MixerConfig::SpatialFc),
    ]
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::array::uniform4(1usize..3),
        prop::array::uniform4(mixer_strategy()),
        prop_oneof![Just(NormKind::Mln), Just(NormKind::Ln), Just(NormKind::Bn), Just(NormKind::None)],
        any::<bool>(),
        any::<bool>(),
        prop_oneof![Just(16usize), Just(32)],
    )
        .prop_map(|(depths, mixers, norm, ls, mlp, size)| {
            let mut c = ModelConfig::tiny(3, size);
            c.dims = [4, 8, 8, 16];
            c.depths = depths;
            c.mixers = mixers;
            c.norm = norm;
            c.layer_scale_init = ls.then_some(0.1);
            c.channel_mlp = mlp;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analysis_agrees_with_built_model(config in config_strategy(), seed in any::<u64>()) {
        let model = Model::<f32>::build(&config, seed).unwrap();
        let report = analyze(&config, config.input_size).unwrap();
        prop_assert_eq!(model.param_counts(), (report.trainable_params, report.frozen_params));
        let (x, _) = SynthDataset::new(seed, config.input_size).batch(0, 2);
        let logits = model.infer(&x).unwrap();
        prop_assert_eq!(logits.shape(), &[2, 3]);
        prop_assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn canonical_json_roundtrips(config in config_strategy()) {
        let text = config.to_canonical_json();
        prop_assert_eq!(ModelConfig::from_json_str(&text).unwrap(), config);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..10_000) {
        let bytes = encode_model(&Model::<f32>::build(&ModelConfig::tiny(4, 16), 0).unwrap());
        let cut = cut % bytes.len();
        prop_assert!(decode_model(&bytes[..cut]).is_err());
    }
}

#[test]
fn s12_payload_is_four_bytes_per_scalar() {
    let model = Model::<f32>::build_zeroed(&ModelConfig::variant(metaformer_core::Variant::S12)).unwrap();
    let bytes = encode_model(&model);
    let container = decode(&bytes).unwrap();
    let payload: u64 = container.tensors.iter().map(|(r, _)| r.byte_len).sum();
    let (trainable, frozen) = model.param_counts();
    assert_eq!(payload, (trainable + frozen) * 4);
    assert_eq!(container.tensors.len(), model.store.len());
    let header_and_manifest = bytes.len() as u64 - payload;
    assert_eq!(16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()), header_and_manifest);
}

#[test]
fn input_file_bytes_follow_documented_layout() {
    let x = Tensor::new([1, 3, 1, 2], vec![1.0, 0.0, 0.0, 128.0 / 255.0, 0.0, 1.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mfck");
    metaformer_core::checkpoint::save_input(&x, &path).unwrap();
    let manifest = br#"{"config":null,"tensors":[{"name":"input","shape":[1,3,1,2],"dtype":"f32","frozen":false,"offset":0,"byte_len":24}]}"#;
    let mut want = b"MFCK".to_vec();
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    want.extend_from_slice(manifest);
    for v in x.data() {
        want.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(std::fs::read(&path).unwrap(), want);
}

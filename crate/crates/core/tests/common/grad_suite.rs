//! Named finite-difference cases shared by the gradient tests and the
//! acceptance runner.

use metaformer_core::block::{channel_mlp, drop_path, Block, BlockConfig};
use metaformer_core::kernels::NormAxes;
use metaformer_core::mixer::{self, AttentionWeights};
use metaformer_core::norm::{self, NormKind};
use metaformer_core::params::{ForwardCtx, Init, Mode, ParamKind, ParamStore};
use metaformer_core::{Activation, MixerConfig, Model, ModelConfig, Tape, Tensor};
use rand::Rng;

use super::{check_model, check_op, random, rel_err, rng, FD_STEP};

pub type Case = (String, f64);

fn case(name: &str, err: f64) -> Case {
    (name.to_string(), err)
}

/// One case per differentiable tape op and per public functional layer.
pub fn op_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let m = 24;
    out.push(case(
        "conv2d grouped strided",
        check_op(&[random(&[2, 4, 5, 5], 1), random(&[6, 2, 3, 3], 2), random(&[6], 3)], m, 1, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 0), 2).unwrap()
        }),
    ));
    out.push(case(
        "conv2d depthwise padded",
        check_op(&[random(&[1, 3, 4, 4], 4), random(&[3, 1, 3, 3], 5)], m, 2, |t, v| {
            t.conv2d(v[0], v[1], None, (1, 1), (1, 1), 3).unwrap()
        }),
    ));
    out.push(case(
        "conv2d 7x7 stride 4 embed",
        check_op(&[random(&[1, 3, 13, 11], 6), random(&[4, 3, 7, 7], 7), random(&[4], 8)], m, 3, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), (4, 4), (2, 2), 1).unwrap()
        }),
    ));
    for k in [1, 3, 5] {
        out.push(case(
            &format!("avg_pool2d_excl k={k}"),
            check_op(&[random(&[2, 2, 4, 5], 10 + k as u64)], m, 4, |t, v| t.avg_pool2d_excl(v[0], k).unwrap()),
        ));
    }
    let ab = [random(&[2, 3], 20), random(&[2, 3], 21)];
    out.push(case("add", check_op(&ab, m, 5, |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(case("sub", check_op(&ab, m, 6, |t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(case("mul", check_op(&ab, m, 7, |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(case("scale", check_op(&ab[..1], m, 8, |t, v| t.scale(v[0], -1.7))));
    let xc = [random(&[2, 3, 2, 2], 22), random(&[3], 23)];
    out.push(case("mul_channel", check_op(&xc, m, 9, |t, v| t.mul_channel(v[0], v[1]).unwrap())));
    out.push(case("add_channel", check_op(&xc, m, 10, |t, v| t.add_channel(v[0], v[1]).unwrap())));
    out.push(case(
        "channel_affine_const",
        check_op(&xc[..1], m, 11, |t, v| {
            t.channel_affine_const(v[0], vec![0.5, -2.0, 1.5], vec![1.0, 0.0, -1.0]).unwrap()
        }),
    ));
    out.push(case(
        "scale_samples",
        check_op(&xc[..1], m, 12, |t, v| t.scale_samples(v[0], vec![0.0, 1.25]).unwrap()),
    ));
    for act in [Activation::Gelu, Activation::GeluTanh, Activation::Relu, Activation::Silu] {
        // keep ReLU inputs away from the kink
        let x = random(&[3, 4], 30).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        out.push(case(&format!("activation {act:?}"), check_op(&[x], m, 13, move |t, v| t.activation(v[0], act))));
    }
    for axes in [NormAxes::Sample, NormAxes::Position, NormAxes::Channel] {
        out.push(case(
            &format!("normalize {axes:?}"),
            check_op(&[random(&[2, 3, 2, 3], 31)], m, 14, move |t, v| t.normalize(v[0], axes, 1e-5).unwrap().0),
        ));
    }
    let g = random(&[3], 32).map(|v| v + 1.5);
    let b = random(&[3], 33);
    let x = random(&[2, 3, 2, 3], 34);
    out.push(case(
        "mln",
        check_op(&[x.clone(), g.clone(), b.clone()], m, 15, |t, v| norm::mln(t, v[0], v[1], v[2], 1e-5).unwrap()),
    ));
    out.push(case(
        "layer_norm_channel",
        check_op(&[x.clone(), g.clone(), b.clone()], m, 16, |t, v| {
            norm::layer_norm_channel(t, v[0], v[1], v[2], 1e-5).unwrap()
        }),
    ));
    out.push(case(
        "batch_norm train",
        check_op(&[x.clone(), g.clone(), b.clone()], m, 17, |t, v| {
            norm::batch_norm_train(t, v[0], v[1], v[2], 1e-5).unwrap().0
        }),
    ));
    out.push(case(
        "batch_norm eval",
        check_op(&[x.clone(), g, b], m, 18, |t, v| {
            norm::batch_norm_eval(t, v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5).unwrap()
        }),
    ));
    out.push(case("reshape", check_op(std::slice::from_ref(&x), m, 19, |t, v| t.reshape(v[0], [6, 6]).unwrap())));
    out.push(case("permute", check_op(std::slice::from_ref(&x), m, 20, |t, v| t.permute(v[0], &[2, 0, 3, 1]).unwrap())));
    out.push(case("narrow", check_op(std::slice::from_ref(&x), m, 21, |t, v| t.narrow(v[0], 3, 1, 2).unwrap())));
    out.push(case(
        "matmul",
        check_op(&[random(&[2, 3, 4], 40), random(&[2, 4, 5], 41)], m, 22, |t, v| t.matmul(v[0], v[1], false).unwrap()),
    ));
    out.push(case(
        "matmul trans_b",
        check_op(&[random(&[2, 3, 4], 42), random(&[2, 5, 4], 43)], m, 23, |t, v| t.matmul(v[0], v[1], true).unwrap()),
    ));
    out.push(case(
        "linear",
        check_op(&[random(&[2, 3, 4], 44), random(&[5, 4], 45), random(&[5], 46)], m, 24, |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
    ));
    out.push(case(
        "softmax_lastdim",
        check_op(&[random(&[3, 5], 47).map(|v| 3.0 * v)], m, 25, |t, v| t.softmax_lastdim(v[0]).unwrap()),
    ));
    out.push(case("mean_spatial", check_op(std::slice::from_ref(&x), m, 26, |t, v| t.mean_spatial(v[0]).unwrap())));
    out.push(case("sum", check_op(std::slice::from_ref(&x), m, 27, |t, v| t.sum(v[0]))));
    out.push(case("mean", check_op(&[x], m, 28, |t, v| t.mean(v[0]))));
    for eps in [0.0, 0.1] {
        out.push(case(
            &format!("cross_entropy smoothing {eps}"),
            check_op(&[random(&[4, 5], 48).map(|v| 2.0 * v)], m, 29, move |t, v| {
                t.cross_entropy(v[0], &[0, 4, 2, 2], eps).unwrap()
            }),
        ));
    }
    out.extend(mixer_cases());
    out.push(case(
        "channel_mlp",
        check_op(
            &[random(&[2, 3, 2, 2], 50), random(&[12, 3, 1, 1], 51), random(&[12], 52), random(&[3, 12, 1, 1], 53), random(&[3], 54)],
            m,
            30,
            |t, v| channel_mlp(t, v[0], (v[1], v[2]), (v[3], v[4]), Activation::Gelu).unwrap(),
        ),
    ));
    out.push(case(
        "drop_path train",
        check_op(&[random(&[4, 2, 2, 2], 55)], m, 31, |t, v| {
            drop_path(t, v[0], 0.5, Mode::Train, &mut rng(3)).unwrap()
        }),
    ));
    out
}

fn mixer_cases() -> Vec<Case> {
    let m = 24;
    let x = random(&[2, 4, 3, 3], 60);
    let mut out = vec![
        case("pooling mixer", check_op(std::slice::from_ref(&x), m, 40, |t, v| mixer::pooling_mixer(t, v[0], 3).unwrap())),
        case(
            "random matrix mixer (input)",
            check_op(std::slice::from_ref(&x), m, 41, |t, v| {
                let w = t.constant(random(&[9, 9], 61));
                mixer::random_matrix_mixer(t, v[0], w).unwrap()
            }),
        ),
        case(
            "depthwise conv mixer",
            check_op(&[x.clone(), random(&[4, 1, 3, 3], 62), random(&[4], 63)], m, 42, |t, v| {
                mixer::depthwise_conv_mixer(t, v[0], v[1], v[2]).unwrap()
            }),
        ),
        case(
            "spatial fc mixer",
            check_op(&[x.clone(), random(&[9, 9], 64), random(&[9], 65)], m, 43, |t, v| {
                mixer::spatial_fc_mixer(t, v[0], v[1], v[2]).unwrap()
            }),
        ),
    ];
    out.push(case(
        "attention mixer",
        check_op(
            &[x, random(&[12, 4], 66), random(&[12], 67), random(&[4, 4], 68), random(&[4], 69)],
            m,
            44,
            |t, v| {
                let w = AttentionWeights {
                    qkv_weight: v[1],
                    qkv_bias: v[2],
                    proj_weight: v[3],
                    proj_bias: v[4],
                };
                mixer::attention_mixer(t, v[0], w, 2).unwrap()
            },
        ),
    ));
    out
}

pub const MIXERS: [MixerConfig; 6] = [
    MixerConfig::Pooling { pool_size: 3 },
    MixerConfig::Identity,
    MixerConfig::RandomMatrix,
    MixerConfig::DepthwiseConv { kernel: 3 },
    MixerConfig::Attention { heads: Some(2) },
    MixerConfig::SpatialFc,
];
pub const NORMS: [NormKind; 4] = [NormKind::Mln, NormKind::Ln, NormKind::Bn, NormKind::None];
pub const ACTIVATIONS: [Activation; 3] = [Activation::Gelu, Activation::Relu, Activation::Silu];

/// Gradient of one whole block, train mode, on a `[2, 8, 6, 6]` input, with
/// respect to the input and a sample of every trainable tensor.
pub fn block_case(mixer: MixerConfig, norm: NormKind, activation: Activation, seed: u64) -> f64 {
    let (c, side) = (8, 6);
    let config = BlockConfig {
        mixer,
        norm,
        activation,
        use_residual: true,
        use_channel_mlp: true,
        layer_scale_init: Some(0.5),
        drop_path_rate: 0.25,
    };
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(seed);
    let block = Block::build(config, c, side * side, "b", &mut store, &mut Init::Random(&mut init_rng)).unwrap();
    // move norm affines and biases off their trivial init so every path is exercised
    let mut r = rng(seed ^ 0x55);
    for e in store.entries_mut() {
        if e.kind == ParamKind::Trainable && !e.name.contains("layer_scale") {
            let scale = if e.name.ends_with(".weight") && e.value.ndim() == 1 { 1.0 } else { 0.0 };
            for v in e.value.data_mut() {
                *v += scale + r.random_range(-0.3..0.3);
            }
        }
    }
    let x = random(&[2, c, side, side], seed ^ 0x77);
    // weights ~ 1/sqrt(n) keep the loss O(1), so cancellation noise in the
    // central difference stays far below the relative-error floor
    let n = (2 * c * side * side) as f64;
    let w = random(&[2, c, side, side], seed ^ 0x99).map(|v| v / n.sqrt());

    let loss = |store: &ParamStore<f64>, x: &Tensor<f64>, grads: bool| {
        let mut t = Tape::new();
        let bindings = store.bind(&mut t);
        let xv = t.param(x.clone());
        let mut drop_rng = rng(seed ^ 0xD0);
        let mut ctx = ForwardCtx::new(&mut t, store, &bindings, Mode::Train, &mut drop_rng);
        let y = block.forward(&mut ctx, xv).unwrap();
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv).unwrap();
        let l = t.sum(prod);
        let value = t.value(l).item().unwrap();
        let g = grads.then(|| {
            let mut g = t.backward(l).unwrap();
            let per: Vec<Option<Tensor<f64>>> = store.ids().map(|id| bindings.get(id).and_then(|v| g.take(v))).collect();
            (g.take(xv).unwrap(), per)
        });
        (value, g)
    };
    let (_, g) = loss(&store, &x, true);
    let (gx, per) = g.unwrap();
    let mut worst = 0.0f64;
    let mut pick = rng(seed ^ 0x33);
    for _ in 0..6 {
        let i = pick.random_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let plus = loss(&store, &xp, false).0;
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let minus = loss(&store, &xp, false).0;
        worst = worst.max(rel_err(gx.data()[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let g = per[id.index()].as_ref().unwrap();
        for _ in 0..3 {
            let i = pick.random_range(0..g.numel());
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = loss(&store, &x, false).0;
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = loss(&store, &x, false).0;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Every mixer x norm x activation combination.
pub fn block_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let mut seed = 100;
    for mixer in MIXERS {
        for norm in NORMS {
            for act in ACTIVATIONS {
                seed += 1;
                out.push(case(&format!("block {} {} {:?}", mixer.name(), norm.as_str(), act), block_case(mixer, norm, act, seed)));
            }
        }
    }
    out
}

/// The shipped gradient-check config, built in f64, batch of 2.
pub fn tiny_model_case() -> Case {
    let config = ModelConfig::from_path(&super::workspace_file("configs/gradcheck-tiny.json")).unwrap();
    let model = Model::<f64>::build(&config, 0).unwrap();
    let s = config.input_size;
    let x = random(&[2, 3, s, s], 900);
    case("tiny full model", check_model(&model, &x, &[1, 3], 3, 0))
}

//! Test-side oracles: central finite differences and brute-force reference
//! formulas written without the library's kernels.
#![allow(dead_code)]

pub mod grad_suite;

use metaformer_core::params::{ForwardCtx, Mode, ParamKind};
use metaformer_core::{Model, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Coordinates to probe: all of them for small tensors, else a seeded sample.
fn coords(n: usize, max: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|_| r.random_range(0..n)).collect()
    }
}

/// Checks `d/dinputs sum(w * f(inputs))` for a fixed random `w`. Inputs are
/// tape parameters; `f` must be deterministic. Returns the worst relative
/// error over the probed coordinates.
pub fn check_op(
    inputs: &[Tensor<f64>],
    max_coords: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let forward = |vals: &[Tensor<f64>]| -> Tensor<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let y = f(&mut t, &vars);
        t.value(y).clone()
    };
    let y0 = forward(inputs);
    let w = random(y0.shape(), seed ^ 0xA5A5);
    let dot = |y: &Tensor<f64>| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.param(v.clone())).collect();
    let y = f(&mut t, &vars);
    let wv = t.constant(w.clone());
    let prod = t.mul(y, wv).unwrap();
    let loss = t.sum(prod);
    let grads = t.backward(loss).unwrap();

    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("input gradient");
        for i in coords(input.numel(), max_coords, &mut r) {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += FD_STEP;
            let plus = dot(&forward(&vals));
            vals[k].data_mut()[i] -= 2.0 * FD_STEP;
            let minus = dot(&forward(&vals));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

/// Finite-difference check of a full model's loss against its parameters.
/// Runs in train mode with the drop-path RNG reseeded for every evaluation.
pub fn check_model(model: &Model<f64>, input: &Tensor<f64>, targets: &[usize], max_coords: usize, seed: u64) -> f64 {
    let run = |m: &Model<f64>, want_grads: bool| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut drop_rng = rng(seed);
        let mut t = Tape::new();
        let b = m.store.bind(&mut t);
        let x = t.constant(input.clone());
        let mut ctx = ForwardCtx::new(&mut t, &m.store, &b, Mode::Train, &mut drop_rng);
        let logits = m.forward(&mut ctx, x).unwrap();
        let loss = t.cross_entropy(logits, targets, 0.0).unwrap();
        let value = t.value(loss).item().unwrap();
        if !want_grads {
            return (value, vec![]);
        }
        let mut grads = t.backward(loss).unwrap();
        let per = m.store.ids().map(|id| b.get(id).and_then(|v| grads.take(v))).collect();
        (value, per)
    };
    let loss_of = |m: &Model<f64>| run(m, false).0;
    let grads = run(model, true).1;
    let mut m = model.clone();
    let mut r = rng(seed ^ 7);
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let g = grads[id.index()].as_ref().expect("trainable gradient");
        for i in coords(g.numel(), max_coords, &mut r) {
            let orig = m.store.get(id).data()[i];
            m.store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = loss_of(&m);
            m.store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = loss_of(&m);
            m.store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Window mean over in-bounds cells of a `k x k` window centred on each
/// position, written as a direct quadruple loop.
pub fn brute_avg_pool(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; x.numel()];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let (mut sum, mut count) = (0.0, 0usize);
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, xx) = (i + di, j + dj);
                            if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                sum += x.at(&[n, ch, y as usize, xx as usize]);
                                count += 1;
                            }
                        }
                    }
                    out[((n * c + ch) * h + i as usize) * w + j as usize] = sum / count as f64;
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Per-sample statistics over `(C, H, W)`, per-channel affine.
pub fn brute_mln(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    let hw = s[2] * s[3];
    let mut out = x.data().to_vec();
    for (n, sample) in out.chunks_mut(per).enumerate() {
        let (mean, var) = mean_var(&x.data()[n * per..(n + 1) * per]);
        for (i, v) in sample.iter_mut().enumerate() {
            let c = i / hw;
            *v = (*v - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Per-position statistics over `C`.
pub fn brute_ln(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let col: Vec<f64> = (0..c).map(|ch| x.at(&[n, ch, i, j])).collect();
                let (mean, var) = mean_var(&col);
                for ch in 0..c {
                    out.data_mut()[((n * c + ch) * h + i) * w + j] =
                        (col[ch] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
                }
            }
        }
    }
    out
}

/// Per-channel statistics over `(B, H, W)`. Returns the output, batch means
/// and unbiased batch variances.
pub fn brute_bn(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    let (mut means, mut unbiased) = (vec![], vec![]);
    for ch in 0..c {
        let mut vals = vec![];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    vals.push(x.at(&[n, ch, i, j]));
                }
            }
        }
        let (mean, var) = mean_var(&vals);
        let m = vals.len() as f64;
        means.push(mean);
        unbiased.push(var * m / (m - 1.0));
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[((n * c + ch) * h + i) * w + j] =
                        (x.at(&[n, ch, i, j]) - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, means, unbiased)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn workspace_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Direct cross-correlation with zero padding and channel groups.
pub fn brute_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cpg {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize {
                                    acc += w.at(&[o, ci, u, v]) * x.at(&[n, g * cpg + ci, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

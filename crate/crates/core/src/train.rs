//! Desk-scale training: AdamW, warmup + cosine schedule, smoothed
//! cross-entropy and a seeded synthetic shape-classification dataset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model};
use crate::params::{ForwardCtx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const SYNTH_CLASSES: usize = 4;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
pub const DEFAULT_PROBE_SIZE: usize = 256;
/// Probe samples are drawn from indices far past anything a run trains on.
const PROBE_OFFSET: u64 = 1 << 40;

/// Warmup `0 -> lr_peak` over `warmup` steps, then half-cosine down to 0 at
/// `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, lr_peak: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::invalid(format!("cosine_lr: warmup {warmup} must be below total {total}")));
    }
    if step > total {
        return Err(Error::invalid(format!("cosine_lr: step {step} past total {total}")));
    }
    if step < warmup {
        return Ok(lr_peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr_peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Batch-mean cross-entropy against `(1 - smoothing) * onehot + smoothing / K`.
pub fn label_smoothing_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    tape.cross_entropy(logits, targets, T::of(smoothing))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every trainable entry that has a gradient:
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let e = store.entry(*id);
            if g.shape() != e.value.shape() {
                return Err(Error::invalid(format!(
                    "adamw: gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads {
            if store.entry(*id).kind != ParamKind::Trainable {
                continue;
            }
            let p = store.get_mut(*id).data_mut();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64_lossless();
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let (mh, vh) = (*m / bc1, *v / bc2);
                let x = p.to_f64_lossless();
                *p = T::of(x - lr * c.weight_decay * x - lr * mh / (vh.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

/// Seeded synthetic dataset: filled disk, filled square, horizontal stripes
/// and vertical stripes on a random background, with positional jitter and
/// pixel noise. Sample `i` has label `i % 4` and is a pure function of
/// `(seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthDataset {
    pub seed: u64,
    pub size: usize,
}

impl SynthDataset {
    pub fn new(seed: u64, size: usize) -> Self {
        SynthDataset { seed, size }
    }

    pub fn label(&self, index: u64) -> usize {
        (index % SYNTH_CLASSES as u64) as usize
    }

    /// `[3, S, S]` image in `[0, 1]` and its label.
    pub fn sample(&self, index: u64) -> (Vec<f32>, usize) {
        let s = self.size;
        let label = self.label(index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let sf = s as f64;
        let cx = sf / 2.0 + rng.random_range(-0.15..0.15) * sf;
        let cy = sf / 2.0 + rng.random_range(-0.15..0.15) * sf;
        let extent = rng.random_range(0.18..0.32) * sf;
        let period = rng.random_range(3.0..7.0_f64).max(2.0);
        let phase = rng.random_range(0.0..period);
        let inside = |y: f64, x: f64| -> bool {
            match label {
                0 => (x - cx).powi(2) + (y - cy).powi(2) <= extent * extent,
                1 => (x - cx).abs() <= extent && (y - cy).abs() <= extent,
                2 => ((y + phase) / period).floor() as i64 % 2 == 0,
                _ => ((x + phase) / period).floor() as i64 % 2 == 0,
            }
        };
        let mut img = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let on = inside(y as f64 + 0.5, x as f64 + 0.5);
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] };
                    let noisy = base + rng.random_range(-0.1..0.1);
                    img[(c * s + y) * s + x] = noisy.clamp(0.0, 1.0) as f32;
                }
            }
        }
        (img, label)
    }

    /// Stacks samples `start..start + n` into `[n, 3, S, S]`.
    pub fn batch(&self, start: u64, n: usize) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(n * 3 * self.size * self.size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let (img, l) = self.sample(start + i);
            data.extend(img);
            labels.push(l);
        }
        let t = Tensor::new([n, 3, self.size, self.size], data).expect("batch shape");
        (t, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Peak learning rate; `None` means `batch_size / 1024 * 1e-3`.
    pub lr: Option<f64>,
    /// Warmup steps; `None` means `ceil(steps * 5 / 300)`.
    pub warmup: Option<usize>,
    pub label_smoothing: f64,
    pub optimizer: AdamWConfig,
    pub probe_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 300,
            batch_size: 32,
            seed: 0,
            lr: None,
            warmup: None,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            optimizer: AdamWConfig::default(),
            probe_size: DEFAULT_PROBE_SIZE,
        }
    }
}

impl TrainOptions {
    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or(self.batch_size as f64 / 1024.0 * 1e-3)
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or((self.steps * 5).div_ceil(300))
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        let lr = self.peak_lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        if self.steps > 0 && self.warmup_steps() >= self.steps {
            return Err(Error::invalid(format!(
                "warmup {} must be below steps {}",
                self.warmup_steps(),
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Eval-mode loss and accuracy on the fixed probe set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial: ProbeMetrics,
    pub last: ProbeMetrics,
    pub records: Vec<StepRecord>,
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn probe(model: &Model<f32>, data: &SynthDataset, n: usize, smoothing: f64) -> Result<ProbeMetrics> {
    let (x, y) = data.batch(PROBE_OFFSET, n);
    let mut tape = Tape::new();
    let bindings = model.store.bind(&mut tape);
    let xv = tape.constant(x);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::new(&mut tape, &model.store, &bindings, Mode::Eval, &mut unused);
    let logits = model.forward(&mut ctx, xv)?;
    let loss = label_smoothing_ce(&mut tape, logits, &y, smoothing)?;
    Ok(ProbeMetrics {
        loss: tape.value(loss).item()?.to_f64_lossless(),
        accuracy: accuracy(tape.value(logits), &y),
    })
}

/// Trains `model` in place on the synthetic dataset. `on_step` sees every
/// record as it is produced.
pub fn train_model(model: &mut Model<f32>, opts: &TrainOptions, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainReport> {
    opts.validate()?;
    if model.config.num_classes != SYNTH_CLASSES {
        return Err(Error::invalid(format!(
            "the synthetic task has {SYNTH_CLASSES} classes, model has {}",
            model.config.num_classes
        )));
    }
    if model.config.in_channels != 3 {
        return Err(Error::invalid("the synthetic task needs a 3-channel input"));
    }
    let data = SynthDataset::new(opts.seed, model.config.input_size);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    drop_rng.set_stream(u64::MAX);
    let mut optim = AdamW::new(opts.optimizer);
    let trainable: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| model.store.entry(id).kind == ParamKind::Trainable)
        .collect();
    let initial = probe(model, &data, opts.probe_size, opts.label_smoothing)?;
    let mut records = Vec::with_capacity(opts.steps);
    for i in 0..opts.steps {
        let lr = cosine_lr(i, opts.warmup_steps(), opts.steps, opts.peak_lr())?;
        let (x, y) = data.batch((i * opts.batch_size) as u64, opts.batch_size);
        let mut tape = Tape::new();
        let bindings = model.store.bind(&mut tape);
        let xv = tape.constant(x);
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, &bindings, Mode::Train, &mut drop_rng);
        let logits = model.forward(&mut ctx, xv)?;
        let bn = ctx.into_bn_updates();
        let loss = label_smoothing_ce(&mut tape, logits, &y, opts.label_smoothing)?;
        let loss_value = tape.value(loss).item()?.to_f64_lossless();
        if !loss_value.is_finite() {
            return Err(Error::invalid(format!("training diverged at step {}: loss {loss_value}", i + 1)));
        }
        let train_acc = accuracy(tape.value(logits), &y);
        let mut grads = tape.backward(loss)?;
        let pairs: Vec<(ParamId, Tensor<f32>)> = trainable
            .iter()
            .map(|&id| (id, grads.take(bindings.var(id)).expect("trainable leaf has a gradient")))
            .collect();
        drop(tape);
        optim.step(&mut model.store, &pairs, lr)?;
        model.apply_bn_updates(&bn);
        let record = StepRecord {
            step: i + 1,
            lr,
            loss: loss_value,
            train_acc,
        };
        on_step(&record);
        records.push(record);
    }
    let last = probe(model, &data, opts.probe_size, opts.label_smoothing)?;
    Ok(TrainReport { initial, last, records })
}

/// Builds `config` from `opts.seed` and trains it.
pub fn train_loop(config: &ModelConfig, opts: &TrainOptions) -> Result<(Model<f32>, TrainReport)> {
    let mut model = Model::build(config, opts.seed)?;
    let report = train_model(&mut model, opts, |_| {})?;
    Ok((model, report))
}

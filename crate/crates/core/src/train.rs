//! SGD with momentum and weight decay, warmup plus cosine schedule, and the
//! epoch loop.
//!
//! A step splits its batch into micro-batches of at most `micro_batch`
//! images. Each micro-batch's mean cross-entropy is weighted by its share of
//! the batch, so the accumulated gradient is that of the full-batch mean.
//! Micro-batches may run on a thread pool, but their gradients are always
//! summed in micro-batch order, so the thread count never changes a result.

use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::autograd::{Gradients, Tape};
use crate::checkpoint::{save_checkpoint, TrainState};
use crate::data::{batches, eval_batches, AugmentFlags, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::MdMlpModel;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Largest slice of a batch run through one tape.
    pub micro_batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_interval: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub augment: AugmentFlags,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            micro_batch: 16,
            epochs: 200,
            warmup_epochs: 10,
            seed: 0,
            eval_interval: 1,
            max_steps: None,
            augment: AugmentFlags { hflip: true, color_jitter: true },
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("base_lr", self.base_lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("micro_batch", self.micro_batch),
            ("epochs", self.epochs),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero, per epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let (w, e) = (cfg.warmup_epochs, cfg.epochs);
    Ok(if epoch < w {
        cfg.base_lr * (epoch + 1) as f64 / w as f64
    } else {
        cfg.base_lr * 0.5 * (1.0 + (PI * (epoch - w) as f64 / (e - w) as f64).cos())
    })
}

/// `g' = g + λw; m ← μm + g'; w ← w − lr·m` for every parameter. Parameters
/// without a gradient are treated as having a zero one. Nothing is updated
/// if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    momentum: &mut [Tensor<T>],
    lr: f64,
    mu: f64,
    weight_decay: f64,
) -> Result<()> {
    if momentum.len() != store.len() {
        return Err(Error::Usage(format!("{} momentum buffers for {} parameters", momentum.len(), store.len())));
    }
    for (id, g) in grads.params() {
        if !g.all_finite() {
            let max_abs =
                g.data().iter().map(|v| v.as_f64().abs()).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
            return Err(Error::NonFinite { param: store.name(id).to_string(), max_abs });
        }
    }
    let (lr, mu, wd) = (T::of(lr), T::of(mu), T::of(weight_decay));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let m = &mut momentum[id.0];
        let w = store.get_mut(id);
        if m.shape() != w.shape() {
            return Err(Error::Usage(format!(
                "momentum buffer {} has shape {:?}, parameter {:?}",
                id.0,
                m.shape(),
                w.shape()
            )));
        }
        let g = grads.param(id).map(|g| g.data());
        for (k, (wk, mk)) in w.data_mut().iter_mut().zip(m.data_mut()).enumerate() {
            let gk = g.map_or(T::zero(), |g| g[k]) + wd * *wk;
            *mk = mu * *mk + gk;
            *wk -= lr * *mk;
        }
    }
    Ok(())
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Rows `start..end` of a batch tensor.
fn rows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, t.data()[start * per..end * per].to_vec())
}

fn chunk_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect()
}

fn thread_pool(threads: usize) -> Result<Option<ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))
}

/// Runs `f` over `items`, on `pool` when given, returning results in order.
fn ordered_map<I: Sync, O: Send>(
    pool: Option<&ThreadPool>,
    items: &[I],
    f: impl Fn(usize, &I) -> O + Sync + Send,
) -> Vec<O> {
    match pool {
        Some(p) => p.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
        None => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Summed loss (per sample), correct predictions and sample count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    fn add(&mut self, o: BatchStats) {
        self.loss_sum += o.loss_sum;
        self.correct += o.correct;
        self.count += o.count;
    }
}

/// Gradient of the batch-mean cross-entropy, accumulated over micro-batches.
/// Dropout in micro-batch `i` draws from the stream keyed `(seed, step, i)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    model: &MdMlpModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    micro_batch: usize,
    seed: u64,
    step: usize,
    pool: Option<&ThreadPool>,
) -> Result<(Gradients<f32>, BatchStats)> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::Shape(format!("{} labels for images of shape {:?}", n, images.shape())));
    }
    let chunks = chunk_bounds(n, micro_batch.max(1));
    let results = ordered_map(pool, &chunks, |i, &(s, e)| -> Result<(Gradients<f32>, BatchStats)> {
        let tape = Tape::new();
        let x = tape.constant(rows(images, s, e)?)?;
        let mut rng = stream(seed, Purpose::Dropout, &[step as u64, i as u64]);
        let out = model.forward(&tape, store, x, Mode::Train, &mut rng)?;
        let ce = tape.cross_entropy(out.logits, &labels[s..e])?;
        let weighted = tape.scale(ce, (e - s) as f64 / n as f64)?;
        let stats = BatchStats {
            loss_sum: tape.value(ce)?.item()? as f64 * (e - s) as f64,
            correct: count_correct(&*tape.value(out.logits)?, &labels[s..e]),
            count: e - s,
        };
        Ok((tape.backward(weighted)?.into_param_grads(), stats))
    });
    let mut total: Option<Gradients<f32>> = None;
    let mut stats = BatchStats::default();
    for r in results {
        let (g, s) = r?;
        stats.add(s);
        match &mut total {
            Some(t) => t.accumulate(&g)?,
            None => total = Some(g),
        }
    }
    Ok((total.expect("at least one micro-batch"), stats))
}

/// Eval-mode logits for a batch, in micro-batches.
pub fn predict(
    model: &MdMlpModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    micro_batch: usize,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * model.config.num_classes);
    for (s, e) in chunk_bounds(n, micro_batch.max(1)) {
        data.extend_from_slice(logits_of(model, store, &rows(images, s, e)?)?.data());
    }
    Tensor::new(&[n, model.config.num_classes], data)
}

fn logits_of(model: &MdMlpModel, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let x = tape.constant(images.clone())?;
    // Eval mode never draws from the generator.
    let out = model.forward(&tape, store, x, Mode::Eval, &mut stream(0, Purpose::Dropout, &[]))?;
    Ok((*tape.value(out.logits)?).clone())
}

/// Top-1 accuracy over a split, in eval mode. Each tape sees at most
/// `micro_batch` images.
pub fn evaluate(
    model: &MdMlpModel,
    store: &ParamStore<f32>,
    split: &DatasetSplit,
    batch_size: usize,
    micro_batch: usize,
    threads: usize,
) -> Result<f64> {
    let pool = thread_pool(threads)?;
    let mut correct = 0;
    for batch in eval_batches(split, batch_size)? {
        let chunks = chunk_bounds(batch.labels.len(), micro_batch.max(1));
        let counts = ordered_map(pool.as_ref(), &chunks, |_, &(s, e)| -> Result<usize> {
            let logits = logits_of(model, store, &rows(&batch.images, s, e)?)?;
            Ok(count_correct(&logits, &batch.labels[s..e]))
        });
        for c in counts {
            correct += c?;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.6e} train_loss={:.6} train_acc={:.4}",
            self.epoch, self.lr, self.train_loss, self.train_acc
        )?;
        if let Some(a) = self.test_acc {
            write!(f, " test_acc={a:.4}")?;
        }
        Ok(())
    }
}

/// Data and destinations for one training run.
pub struct TrainRun<'a> {
    pub train: &'a DatasetSplit,
    pub test: Option<&'a DatasetSplit>,
    /// Receives `metrics.log`, `last.ckpt` and `best.ckpt` when set.
    pub out_dir: Option<&'a Path>,
}

/// Runs epochs from `state.epoch` until `cfg.epochs` or `cfg.max_steps`,
/// calling `on_epoch` after each. Checkpoint and log writes are fatal on
/// failure. `best.ckpt` tracks test accuracy, or train accuracy when there is
/// no test split or evaluation is disabled.
pub fn train(
    model: &MdMlpModel,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    run: &TrainRun<'_>,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let data_shape = run.train.image_shape();
    let c = &model.config;
    if data_shape != [c.channels, c.height, c.width] || run.train.num_classes > c.num_classes {
        return Err(Error::Config(format!(
            "data is {:?} with {} classes, model expects [{}, {}, {}] with {}",
            data_shape, run.train.num_classes, c.channels, c.height, c.width, c.num_classes
        )));
    }
    if let Some(dir) = run.out_dir {
        fs::create_dir_all(dir)?;
    }
    let pool = thread_pool(cfg.threads)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs && cfg.max_steps.is_none_or(|m| state.step < m) {
        let epoch = state.epoch;
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut stats = BatchStats::default();
        for batch in batches(run.train, cfg.batch_size, cfg.seed, epoch, cfg.augment)? {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let (grads, s) = batch_gradients(
                model,
                store,
                &batch.images,
                &batch.labels,
                cfg.micro_batch,
                cfg.seed,
                state.step,
                pool.as_ref(),
            )?;
            if !s.loss_sum.is_finite() {
                return Err(Error::NonFinite { param: "loss".into(), max_abs: s.loss_sum.abs() });
            }
            sgd_step(store, &grads, &mut state.momentum, lr, cfg.momentum, cfg.weight_decay)?;
            stats.add(s);
            state.step += 1;
        }
        state.epoch += 1;
        let last = state.epoch == cfg.epochs || cfg.max_steps.is_some_and(|m| state.step >= m);
        let due = cfg.eval_interval > 0 && (state.epoch.is_multiple_of(cfg.eval_interval) || last);
        let test_acc = match run.test {
            Some(t) if due => Some(evaluate(model, store, t, cfg.batch_size, cfg.micro_batch, cfg.threads)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: stats.loss_sum / stats.count.max(1) as f64,
            train_acc: stats.correct as f64 / stats.count.max(1) as f64,
            test_acc,
        };
        let score = if run.test.is_some() && cfg.eval_interval > 0 { test_acc } else { Some(m.train_acc) };
        let improved = score.is_some_and(|s| s > state.best_acc);
        if improved {
            state.best_acc = score.unwrap_or(state.best_acc);
        }
        if let Some(dir) = run.out_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.log"))?;
            writeln!(f, "{m}")?;
            save_checkpoint(&dir.join("last.ckpt"), store, &state)?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), store, &state)?;
            }
        }
        on_epoch(&m);
        log.push(m);
    }
    Ok((state, log))
}

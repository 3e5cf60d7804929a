use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mdmlp::attn::export_heatmap;
use mdmlp::autograd::Tape;
use mdmlp::checkpoint::{load_checkpoint, TrainState};
use mdmlp::data::{
    load_cifar100_test, load_cifar100_train, load_cifar10_test, load_cifar10_train, synthetic_dataset, DatasetSplit,
    CIFAR10_BATCH_RECORDS,
};
use mdmlp::model::{count_macs, count_params, init_model, MdMlpModel};
use mdmlp::nn::Mode;
use mdmlp::params::ParamStore;
use mdmlp::patch::PatchGeometry;
use mdmlp::rng::{stream, Purpose};
use mdmlp::train::{argmax_rows, evaluate, train as run_training, EpochMetrics, TrainRun};

use crate::config::{ConfigError, DatasetKind, RunConfig};
use crate::{CliError, Result};

/// Environment variable consulted when no dataset root is configured.
pub const DATA_ENV: &str = "MDMLP_DATA";

/// Structural report of a model config.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub name: String,
    pub geometry: PatchGeometry,
    pub dim: usize,
    pub depth: usize,
    pub axes: Vec<&'static str>,
    /// Closed-form parameter count.
    pub params: usize,
    /// Allocated scalars grouped by top-level module.
    pub parts: BTreeMap<String, usize>,
    pub macs: u64,
}

impl Inspection {
    pub fn params_millions(&self) -> String {
        format!("{:.2}M", self.params as f64 / 1e6)
    }

    pub fn macs_giga(&self) -> String {
        format!("{:.2}G", self.macs as f64 / 1e9)
    }

    /// `(B, H', W', C, D)` with `B` left symbolic.
    pub fn activation_shape(&self) -> String {
        let g = &self.geometry;
        format!("(B, {}, {}, {}, {})", g.grid_height(), g.grid_width(), g.channels(), self.dim)
    }
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.geometry;
        writeln!(f, "config: {}", self.name)?;
        writeln!(
            f,
            "geometry: {}x{}x{} image, {}x{} patches at stride {} -> {}x{} grid, {} values per patch",
            g.height(),
            g.width(),
            g.channels(),
            g.patch(),
            g.patch(),
            g.stride(),
            g.grid_height(),
            g.grid_width(),
            g.patch_area()
        )?;
        writeln!(f, "activation: {}", self.activation_shape())?;
        if self.depth == 0 {
            writeln!(f, "blocks: none")?;
        } else {
            writeln!(f, "blocks: {} x [{}]", self.depth, self.axes.join(", "))?;
        }
        let parts: Vec<String> = self.parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(f, "parts: {}", parts.join(" "))?;
        write!(
            f,
            "params={} ({}) macs={:.2e} ({}, 1 MAC = 1 FLOP)",
            self.params,
            self.params_millions(),
            self.macs as f64,
            self.macs_giga()
        )
    }
}

/// Counts parameters and MACs, and cross-checks the closed form against an
/// actual allocation.
pub fn inspect(cfg: &RunConfig) -> Result<Inspection> {
    cfg.validate()?;
    let m = &cfg.model;
    let geometry = m.validate()?;
    let params = count_params(m)?;
    let macs = count_macs(m)?;
    let (_, store) = init_model::<f32>(m, 0)?;
    let mut parts = BTreeMap::new();
    for (_, p) in store.iter() {
        let top = p.name.split('.').next().unwrap_or(&p.name).to_string();
        *parts.entry(top).or_insert(0) += p.value.len();
    }
    let allocated: usize = parts.values().sum();
    if allocated != params {
        return Err(CliError::Internal(format!("closed-form count {params} but {allocated} scalars allocated")));
    }
    Ok(Inspection {
        name: cfg.name.clone(),
        geometry,
        dim: m.dim,
        depth: m.depth,
        axes: m.mixing_axes().iter().map(|a| a.name()).collect(),
        params,
        parts,
        macs,
    })
}

fn data_root(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(root) = &cfg.data.root {
        return Ok(root.clone());
    }
    match std::env::var_os(DATA_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(CliError::Data(format!(
            "{} needs a dataset root: pass --data DIR, set data.root or set {DATA_ENV}",
            cfg.data.dataset.as_str()
        ))),
    }
}

fn limit(split: DatasetSplit, n: Option<usize>) -> DatasetSplit {
    match n {
        Some(n) => split.truncate(n),
        None => split,
    }
}

fn no_loader(cfg: &RunConfig) -> CliError {
    CliError::Data(format!("config `{}` has data.dataset = none; it supports `inspect` only", cfg.name))
}

pub fn load_train_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let d = &cfg.data;
    let m = &cfg.model;
    let split = match d.dataset {
        DatasetKind::Cifar10 => {
            let files = d.train_limit.map_or(5, |n| n.div_ceil(CIFAR10_BATCH_RECORDS).clamp(1, 5));
            load_cifar10_train(&data_root(cfg)?, files)?
        }
        DatasetKind::Cifar100 => load_cifar100_train(&data_root(cfg)?)?,
        DatasetKind::Synthetic => synthetic_dataset(d.seed, d.synthetic_train, m.num_classes, m.height, m.width)?,
        DatasetKind::None => return Err(no_loader(cfg)),
    };
    Ok(limit(split, d.train_limit))
}

pub fn load_test_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let d = &cfg.data;
    let m = &cfg.model;
    let split = match d.dataset {
        DatasetKind::Cifar10 => load_cifar10_test(&data_root(cfg)?)?,
        DatasetKind::Cifar100 => load_cifar100_test(&data_root(cfg)?)?,
        DatasetKind::Synthetic => {
            synthetic_dataset(d.seed.wrapping_add(1), d.synthetic_test, m.num_classes, m.height, m.width)?
        }
        DatasetKind::None => return Err(no_loader(cfg)),
    };
    Ok(limit(split, d.test_limit))
}

/// Model with parameters from `checkpoint`, or freshly initialized from
/// the training seed.
fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(MdMlpModel, ParamStore<f32>, Option<TrainState>)> {
    let (model, mut store) = init_model::<f32>(&cfg.model, cfg.train.seed)?;
    let state = match checkpoint {
        Some(path) => Some(load_checkpoint(path, &mut store)?),
        None => None,
    };
    Ok((model, store, state))
}

pub struct TrainOutcome {
    pub model: MdMlpModel,
    pub store: ParamStore<f32>,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Eval-mode accuracy of the final parameters on the training split.
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Trains from scratch, or from `resume`, writing `config.txt`,
/// `metrics.log`, `last.ckpt` and `best.ckpt` into `out_dir`. Progress and
/// the resolved config go to `log`.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_split = load_train_split(cfg)?;
    let test_split = load_test_split(cfg)?;
    let (model, mut store, state) = load_model(cfg, resume)?;
    let state = state.unwrap_or_else(|| TrainState::new(&store));

    fs::create_dir_all(out_dir)?;
    let resolved = cfg.to_text();
    fs::write(out_dir.join("config.txt"), &resolved)?;
    write!(log, "{resolved}")?;
    let metrics_path = out_dir.join("metrics.log");
    if resume.is_none() && metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    writeln!(
        log,
        "# data: {} train / {} test images, starting at epoch {} step {}",
        train_split.len(),
        test_split.len(),
        state.epoch,
        state.step
    )?;

    let run = TrainRun { train: &train_split, test: Some(&test_split), out_dir: Some(out_dir) };
    let mut io_err = None;
    let (state, metrics) = run_training(&model, &mut store, &cfg.train, &run, state, |m| {
        if let Err(e) = writeln!(log, "{m}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let t = &cfg.train;
    let train_acc = evaluate(&model, &store, &train_split, t.batch_size, t.micro_batch, t.threads)?;
    let test_acc = evaluate(&model, &store, &test_split, t.batch_size, t.micro_batch, t.threads)?;
    writeln!(
        log,
        "final step={} train_acc={train_acc:.4} test_acc={test_acc:.4} best_acc={:.4} (best.ckpt)",
        state.step, state.best_acc
    )?;
    Ok(TrainOutcome { model, store, state, metrics, train_acc, test_acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "accuracy={:.4} ({}/{})", self.accuracy(), self.correct, self.total)
    }
}

/// Top-1 accuracy on the test split.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let test = load_test_split(cfg)?;
    let (model, store, _) = load_model(cfg, checkpoint)?;
    let t = &cfg.train;
    let acc = evaluate(&model, &store, &test, t.batch_size, t.micro_batch, t.threads)?;
    Ok(EvalReport { correct: (acc * test.len() as f64).round() as usize, total: test.len() })
}

/// Parses `7`, `0..8`, `2..=5` or comma-separated mixes of those, checking
/// every index against `n`.
pub fn parse_indices(selection: &str, n: usize) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("bad image selection `{selection}`; use e.g. 3, 0..8 or 1,4,9"));
    let mut out = Vec::new();
    for part in selection.split(',').map(str::trim) {
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        if let Some((a, b)) = part.split_once("..=") {
            out.extend(num(a)?..=num(b)?);
        } else if let Some((a, b)) = part.split_once("..") {
            out.extend(num(a)?..num(b)?);
        } else {
            out.push(num(part)?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    if let Some(&i) = out.iter().find(|&&i| i >= n) {
        return Err(CliError::Usage(format!("image {i} out of range for a split of {n}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    /// `max |V - 1|` over the field.
    pub max_deviation: f64,
    pub path: PathBuf,
}

impl fmt::Display for Heatmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "image={} label={} predicted={} max|V-1|={:.6e} -> {}",
            self.index,
            self.label,
            self.predicted,
            self.max_deviation,
            self.path.display()
        )
    }
}

/// Writes `heatmap_<index>.pgm` for each selected test image.
pub fn visualize(cfg: &RunConfig, checkpoint: Option<&Path>, images: &str, out_dir: &Path) -> Result<Vec<Heatmap>> {
    cfg.validate()?;
    if !cfg.model.attn_tool {
        return Err(ConfigError::Invalid {
            key: "model.attn_tool".into(),
            message: "visualize needs a model built with the attention tool".into(),
            origin: cfg.origin("model.attn_tool"),
        }
        .into());
    }
    let test = load_test_split(cfg)?;
    let indices = parse_indices(images, test.len())?;
    let (model, store, _) = load_model(cfg, checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let mut rng = stream(0, Purpose::Dropout, &[]);
    let mut out = Vec::with_capacity(indices.len());
    for index in indices {
        let img = &test.images[index];
        let mut shape = vec![1];
        shape.extend_from_slice(img.pixels.shape());
        let tape = Tape::new();
        let x = tape.constant(img.pixels.reshape(&shape)?)?;
        let fwd = model.forward(&tape, &store, x, Mode::Eval, &mut rng)?;
        let field_var = fwd.field.ok_or_else(|| CliError::Internal("model returned no attention field".into()))?;
        let field = tape.value(field_var)?;
        let predicted = argmax_rows(&*tape.value(fwd.logits)?)[0];
        let max_deviation = field.data().iter().map(|&v| (v as f64 - 1.0).abs()).fold(0.0, f64::max);
        let path = out_dir.join(format!("heatmap_{index:05}.pgm"));
        export_heatmap(&*field, &path)?;
        out.push(Heatmap { index, label: img.label, predicted, max_deviation, path });
    }
    Ok(out)
}

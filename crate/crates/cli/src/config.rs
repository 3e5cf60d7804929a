//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Values are integers, floats, booleans (`true`/`false`) or strings, which
//! may be double-quoted. Keys are dotted: `model.*`, `train.*`, `data.*`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use mdmlp::model::ModelConfig;
use mdmlp::train::TrainConfig;
use thiserror::Error;

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line { file: String, line: usize },
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => f.write_str("default value"),
            Origin::Line { file, line } => write!(f, "{file} line {line}"),
            Origin::Flag(flag) => write!(f, "flag {flag}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },

    #[error("{origin}: `{key}` expects {expected}, got `{value}`")]
    Type { key: String, expected: &'static str, value: String, origin: Origin },

    #[error("{origin}: `{key}`: {message}")]
    Invalid { key: String, message: String, origin: Origin },

    #[error("{origin}: {message}")]
    Syntax { message: String, origin: Origin },

    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("no config file `{0}` and no shipped config of that name (shipped: {shipped})", shipped = shipped_names().join(", "))]
    NotFound(String),
}

impl ConfigError {
    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. } | ConfigError::Type { key, .. } | ConfigError::Invalid { key, .. } => {
                Some(key)
            }
            _ => None,
        }
    }
}

/// Configs compiled into the binary, by name.
pub const SHIPPED: &[(&str, &str)] = &[
    ("cifar10_paper", include_str!("../configs/cifar10_paper.conf")),
    ("cifar10_desk", include_str!("../configs/cifar10_desk.conf")),
    ("tiny_synth", include_str!("../configs/tiny_synth.conf")),
    ("cifar10_no_overlap", include_str!("../configs/cifar10_no_overlap.conf")),
    ("cifar10_no_mdblock", include_str!("../configs/cifar10_no_mdblock.conf")),
    ("cifar10_mixer_ablation", include_str!("../configs/cifar10_mixer_ablation.conf")),
    ("flowers102_geometry", include_str!("../configs/flowers102_geometry.conf")),
];

pub fn shipped_names() -> Vec<&'static str> {
    SHIPPED.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    /// Generated squares-on-noise task, see [`mdmlp::data::synthetic_dataset`].
    Synthetic,
    /// Geometry only; commands that need data refuse to run.
    None,
}

impl DatasetKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cifar10" => Self::Cifar10,
            "cifar100" => Self::Cifar100,
            "synthetic" => Self::Synthetic,
            "none" => Self::None,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Synthetic => "synthetic",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the binary batch files. Falls back to `MDMLP_DATA`.
    pub root: Option<PathBuf>,
    /// Keep only the first `n` training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Seed of the synthetic train split; the test split uses `seed + 1`.
    pub seed: u64,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            root: None,
            train_limit: None,
            test_limit: None,
            seed: 0,
            synthetic_train: 1000,
            synthetic_test: 200,
        }
    }
}

/// Everything a command needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Config name, used for the default output directory.
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    origins: HashMap<String, Origin>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            model: ModelConfig::cifar10(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            origins: HashMap::new(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.height",
    "model.width",
    "model.channels",
    "model.patch",
    "model.overlap",
    "model.dim",
    "model.depth",
    "model.expansion",
    "model.num_classes",
    "model.dropout",
    "model.disable_overlap",
    "model.disable_mdblock",
    "model.attn_tool",
    "train.base_lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.micro_batch",
    "train.epochs",
    "train.warmup_epochs",
    "train.seed",
    "train.eval_interval",
    "train.max_steps",
    "train.hflip",
    "train.color_jitter",
    "train.threads",
    "data.dataset",
    "data.root",
    "data.train_limit",
    "data.test_limit",
    "data.seed",
    "data.synthetic_train",
    "data.synthetic_test",
];

fn unquote(raw: &str) -> &str {
    raw.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(raw)
}

/// Strips a trailing comment that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self { name: file.to_string(), ..Self::default() };
        for (i, line) in text.lines().enumerate() {
            let origin = Origin::Line { file: file.to_string(), line: i + 1 };
            let body = strip_comment(line).trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax { message: format!("expected `key = value`, got `{body}`"), origin });
            };
            cfg.set(key.trim(), value.trim(), origin)?;
        }
        Ok(cfg)
    }

    /// Reads a config file, or a shipped config when `name` is not a file.
    pub fn load(name: &str) -> Result<Self, ConfigError> {
        let path = Path::new(name);
        if path.is_file() {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            let mut cfg = Self::parse(&text, &path.display().to_string())?;
            cfg.name = stem.to_string();
            return Ok(cfg);
        }
        match SHIPPED.iter().find(|(n, _)| *n == name) {
            Some((n, text)) => {
                let mut cfg = Self::parse(text, &format!("{n}.conf"))?;
                cfg.name = n.to_string();
                Ok(cfg)
            }
            None => Err(ConfigError::NotFound(name.to_string())),
        }
    }

    /// Applies one `key=value` flag.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let origin = Origin::Flag(format!("--override {assignment}"));
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(ConfigError::Syntax { message: "expected key=value".into(), origin });
        };
        self.set(key.trim(), value.trim(), origin)
    }

    pub fn origin(&self, key: &str) -> Origin {
        self.origins.get(key).cloned().unwrap_or(Origin::Default)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str, origin: Origin) -> Result<(), ConfigError> {
        let value = unquote(raw);
        let ty = |expected: &'static str| ConfigError::Type {
            key: key.to_string(),
            expected,
            value: raw.to_string(),
            origin: origin.clone(),
        };
        let int = || value.parse::<usize>().map_err(|_| ty("a non-negative integer"));
        let u64v = || value.parse::<u64>().map_err(|_| ty("a non-negative integer"));
        let float = || value.parse::<f64>().map_err(|_| ty("a number"));
        let boolean = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ty("`true` or `false`")),
        };
        let optional = || if value == "none" { Ok(None) } else { int().map(Some) };
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.height" => m.height = int()?,
            "model.width" => m.width = int()?,
            "model.channels" => m.channels = int()?,
            "model.patch" => m.patch = int()?,
            "model.overlap" => m.overlap = int()?,
            "model.dim" => m.dim = int()?,
            "model.depth" => m.depth = int()?,
            "model.expansion" => m.expansion = int()?,
            "model.num_classes" => m.num_classes = int()?,
            "model.dropout" => m.dropout = float()?,
            "model.disable_overlap" => m.disable_overlap = boolean()?,
            "model.disable_mdblock" => m.disable_mdblock = boolean()?,
            "model.attn_tool" => m.attn_tool = boolean()?,
            "train.base_lr" => t.base_lr = float()?,
            "train.momentum" => t.momentum = float()?,
            "train.weight_decay" => t.weight_decay = float()?,
            "train.batch_size" => t.batch_size = int()?,
            "train.micro_batch" => t.micro_batch = int()?,
            "train.epochs" => t.epochs = int()?,
            "train.warmup_epochs" => t.warmup_epochs = int()?,
            "train.seed" => t.seed = u64v()?,
            "train.eval_interval" => t.eval_interval = int()?,
            "train.max_steps" => t.max_steps = optional().map_err(|_| ty("an integer or `none`"))?,
            "train.hflip" => t.augment.hflip = boolean()?,
            "train.color_jitter" => t.augment.color_jitter = boolean()?,
            "train.threads" => t.threads = int()?,
            "data.dataset" => {
                d.dataset = DatasetKind::parse(value).ok_or_else(|| ty("one of cifar10, cifar100, synthetic, none"))?
            }
            "data.root" => d.root = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "data.train_limit" => d.train_limit = optional().map_err(|_| ty("an integer or `none`"))?,
            "data.test_limit" => d.test_limit = optional().map_err(|_| ty("an integer or `none`"))?,
            "data.seed" => d.seed = u64v()?,
            "data.synthetic_train" => d.synthetic_train = int()?,
            "data.synthetic_test" => d.synthetic_test = int()?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string(), origin }),
        }
        self.origins.insert(key.to_string(), origin);
        Ok(())
    }

    /// Checks every cross-field invariant, naming the key most directly at
    /// fault and where it was set.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            key: key.to_string(),
            message,
            origin: self.origin(key),
        };
        if let Err(e) = self.model.validate() {
            let msg = e.to_string();
            return Err(invalid(self.blame_model(&msg), msg));
        }
        if let Err(e) = self.train.validate() {
            let msg = e.to_string();
            let field = KEYS
                .iter()
                .filter_map(|k| k.strip_prefix("train."))
                .find(|f| msg.contains(&format!(": {f} ")))
                .unwrap_or("epochs");
            return Err(invalid(&format!("train.{field}"), msg));
        }
        for (key, v) in [("data.train_limit", self.data.train_limit), ("data.test_limit", self.data.test_limit)] {
            if v == Some(0) {
                return Err(invalid(key, "must be at least 1 or `none`".into()));
            }
        }
        if self.data.dataset == DatasetKind::Synthetic {
            if self.model.channels != 3 {
                return Err(invalid("model.channels", "synthetic data has 3 channels".into()));
            }
            for key in ["data.synthetic_train", "data.synthetic_test"] {
                let n = if key.ends_with("train") { self.data.synthetic_train } else { self.data.synthetic_test };
                if n < self.model.num_classes {
                    return Err(invalid(key, format!("{n} images cannot cover {} classes", self.model.num_classes)));
                }
            }
        }
        if matches!(self.data.dataset, DatasetKind::Cifar10 | DatasetKind::Cifar100) {
            let classes = if self.data.dataset == DatasetKind::Cifar10 { 10 } else { 100 };
            let m = &self.model;
            if (m.height, m.width, m.channels) != (32, 32, 3) || m.num_classes != classes {
                return Err(invalid(
                    "data.dataset",
                    format!(
                        "{} images are 32x32x3 with {classes} classes, model is {}x{}x{} with {}",
                        self.data.dataset.as_str(),
                        m.height,
                        m.width,
                        m.channels,
                        m.num_classes
                    ),
                ));
            }
        }
        Ok(())
    }

    fn blame_model(&self, msg: &str) -> &'static str {
        let m = &self.model;
        if msg.contains("dropout") {
            "model.dropout"
        } else if msg.contains("dim must") {
            "model.dim"
        } else if msg.contains("expansion") {
            "model.expansion"
        } else if msg.contains("num_classes") {
            "model.num_classes"
        } else if msg.contains("channel") {
            "model.channels"
        } else if msg.contains("larger than image") || m.disable_overlap {
            "model.patch"
        } else {
            "model.overlap"
        }
    }

    /// Canonical text of every key, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let root = d.root.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values: Vec<String> = vec![
            m.height.to_string(),
            m.width.to_string(),
            m.channels.to_string(),
            m.patch.to_string(),
            m.overlap.to_string(),
            m.dim.to_string(),
            m.depth.to_string(),
            m.expansion.to_string(),
            m.num_classes.to_string(),
            float(m.dropout),
            m.disable_overlap.to_string(),
            m.disable_mdblock.to_string(),
            m.attn_tool.to_string(),
            float(t.base_lr),
            float(t.momentum),
            float(t.weight_decay),
            t.batch_size.to_string(),
            t.micro_batch.to_string(),
            t.epochs.to_string(),
            t.warmup_epochs.to_string(),
            t.seed.to_string(),
            t.eval_interval.to_string(),
            opt(t.max_steps),
            t.augment.hflip.to_string(),
            t.augment.color_jitter.to_string(),
            t.threads.to_string(),
            d.dataset.as_str().to_string(),
            format!("\"{root}\""),
            opt(d.train_limit),
            opt(d.test_limit),
            d.seed.to_string(),
            d.synthetic_train.to_string(),
            d.synthetic_test.to_string(),
        ];
        let mut out = format!("# resolved config `{}`\n", self.name);
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Shortest text that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

//! The MDMLP classifier.
//!
//! Images `B×C×H×W` are optionally reweighted by the attention tool, split
//! into overlapping patches and embedded by one linear map shared across
//! every patch position and channel, giving a `B×H'×W'×C×D` activation.
//! Each of the N blocks then applies four mixing layers in the order
//! height, width, channel, token. A mixing layer normalizes over `D`,
//! moves its axis last, runs the MLP branch, moves the axis back and adds
//! the residual. The head normalizes over `D`, averages over `H'`, `W'`
//! and `C`, and maps `D` to class logits.

use rand::Rng;

use crate::attn::{AttnTool, ATTN_HIDDEN};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNormUnit, LinearUnit, MlpUnit, Mode};
use crate::params::ParamStore;
use crate::patch::PatchGeometry;
use crate::tensor::Scalar;

/// Axis mixed by one layer of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixAxis {
    Height,
    Width,
    Channel,
    Token,
}

impl MixAxis {
    pub const ALL: [MixAxis; 4] = [MixAxis::Height, MixAxis::Width, MixAxis::Channel, MixAxis::Token];

    pub fn name(self) -> &'static str {
        match self {
            MixAxis::Height => "height",
            MixAxis::Width => "width",
            MixAxis::Channel => "channel",
            MixAxis::Token => "token",
        }
    }

    /// Position of this axis in the `B×H'×W'×C×D` activation.
    pub fn activation_axis(self) -> usize {
        match self {
            MixAxis::Height => 1,
            MixAxis::Width => 2,
            MixAxis::Channel => 3,
            MixAxis::Token => 4,
        }
    }

    /// Extent of the axis: `H'`, `W'`, `C` or `D`.
    pub fn extent(self, geom: &PatchGeometry, dim: usize) -> usize {
        match self {
            MixAxis::Height => geom.grid_height(),
            MixAxis::Width => geom.grid_width(),
            MixAxis::Channel => geom.channels(),
            MixAxis::Token => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side `p`.
    pub patch: usize,
    /// Overlap stride `O`.
    pub overlap: usize,
    /// Base (token) dimension `D`.
    pub dim: usize,
    /// Number of blocks `N`.
    pub depth: usize,
    /// Expansion factor `f`: hidden width of a mixing MLP over `n` is `f·n`.
    pub expansion: usize,
    pub num_classes: usize,
    pub dropout: f64,
    /// Forces `O = p`.
    pub disable_overlap: bool,
    /// Drops the height and width layers, leaving channel and token mixing.
    pub disable_mdblock: bool,
    pub attn_tool: bool,
}

impl ModelConfig {
    /// CIFAR-10 setup: 32×32×3, p=4, O=2, D=64, N=8, f=4.
    pub fn cifar10() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            overlap: 2,
            dim: 64,
            depth: 8,
            expansion: 4,
            num_classes: 10,
            dropout: 0.0,
            disable_overlap: false,
            disable_mdblock: false,
            attn_tool: false,
        }
    }

    /// Flowers-102 geometry: 224×224×3, p=14, O=7.
    pub fn flowers102() -> Self {
        Self { height: 224, width: 224, patch: 14, overlap: 7, num_classes: 102, ..Self::cifar10() }
    }

    /// Effective patch geometry after the no-overlap ablation.
    pub fn geometry(&self) -> Result<PatchGeometry> {
        let stride = if self.disable_overlap { self.patch } else { self.overlap };
        PatchGeometry::new(self.height, self.width, self.channels, self.patch, stride)
    }

    pub fn mixing_axes(&self) -> &'static [MixAxis] {
        if self.disable_mdblock {
            &MixAxis::ALL[2..]
        } else {
            &MixAxis::ALL
        }
    }

    pub fn validate(&self) -> Result<PatchGeometry> {
        for (name, v) in [("dim", self.dim), ("expansion", self.expansion), ("num_classes", self.num_classes)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        crate::nn::check_dropout_rate(self.dropout)?;
        self.geometry()
    }
}

/// Exact trainable-scalar count, from closed forms only.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    let g = cfg.validate()?;
    let (d, f, k) = (cfg.dim, cfg.expansion, cfg.num_classes);
    let embed = g.patch_area() * d + d;
    let block: usize = cfg
        .mixing_axes()
        .iter()
        .map(|a| {
            let n = a.extent(&g, d);
            2 * f * n * n + (f + 1) * n + 2 * d
        })
        .sum();
    let head = 2 * d + d * k + k;
    let attn = if cfg.attn_tool {
        let m = ATTN_HIDDEN;
        [cfg.width, cfg.height].iter().map(|&n| 2 * m * n + m + n + 2 * n).sum()
    } else {
        0
    };
    Ok(embed + cfg.depth * block + head + attn)
}

/// Multiply-accumulates of one image's forward pass through the linear maps
/// (1 MAC counted as 1 FLOP). Norms, activations and pooling are not counted.
pub fn count_macs(cfg: &ModelConfig) -> Result<u64> {
    let g = cfg.validate()?;
    let (d, f, k) = (cfg.dim as u64, cfg.expansion as u64, cfg.num_classes as u64);
    let tokens = (g.grid_height() * g.grid_width() * g.channels()) as u64;
    let elems = tokens * d;
    let embed = tokens * g.patch_area() as u64 * d;
    let block: u64 = cfg.mixing_axes().iter().map(|a| 2 * f * a.extent(&g, cfg.dim) as u64 * elems).sum();
    let attn = if cfg.attn_tool { 4 * ATTN_HIDDEN as u64 * (cfg.channels * cfg.height * cfg.width) as u64 } else { 0 };
    Ok(attn + embed + cfg.depth as u64 * block + d * k)
}

#[derive(Debug, Clone)]
pub struct MdLayer {
    pub axis: MixAxis,
    pub norm: LayerNormUnit,
    pub mlp: MlpUnit,
}

impl MdLayer {
    /// `x + mlp_axis(norm(x))` on a `B×H'×W'×C×D` input, where the MLP mixes
    /// along this layer's axis.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let x0 = self.norm.forward(tape, store, x)?;
        let branch = self.mlp.forward_along(tape, store, x0, self.axis.activation_axis(), mode, rng)?;
        tape.add(x, branch)
    }
}

#[derive(Debug, Clone)]
pub struct MdBlock {
    pub layers: Vec<MdLayer>,
}

/// Output of a model forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Attention field `B×1×H×W` when the attention tool is enabled.
    pub field: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MdMlpModel {
    pub config: ModelConfig,
    pub geometry: PatchGeometry,
    pub attn: Option<AttnTool>,
    pub embed: LinearUnit,
    pub blocks: Vec<MdBlock>,
    pub norm: LayerNormUnit,
    pub head: LinearUnit,
}

/// Allocates and initializes every parameter of `cfg` in `store`.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<MdMlpModel> {
    let geometry = cfg.validate()?;
    let d = cfg.dim;
    let attn = if cfg.attn_tool {
        Some(AttnTool::new(store, "attn", cfg.channels, cfg.height, cfg.width, cfg.dropout, rng)?)
    } else {
        None
    };
    let embed = LinearUnit::new(store, "embed", geometry.patch_area(), d, Init::Uniform, rng)?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let mut layers = Vec::with_capacity(4);
        for &axis in cfg.mixing_axes() {
            let prefix = format!("blocks.{b}.{}", axis.name());
            let n = axis.extent(&geometry, d);
            let norm = LayerNormUnit::new(store, &format!("{prefix}.norm"), d)?;
            let mlp =
                MlpUnit::new(store, &format!("{prefix}.mlp"), n, cfg.expansion * n, cfg.dropout, Init::Uniform, rng)?;
            layers.push(MdLayer { axis, norm, mlp });
        }
        blocks.push(MdBlock { layers });
    }
    let norm = LayerNormUnit::new(store, "norm", d)?;
    let head = LinearUnit::new(store, "head", d, cfg.num_classes, Init::Uniform, rng)?;
    Ok(MdMlpModel { config: cfg.clone(), geometry, attn, embed, blocks, norm, head })
}

/// Builds a model into a fresh store from a seed.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(MdMlpModel, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Init, &[]);
    let model = build_model(cfg, &mut store, &mut rng)?;
    Ok((model, store))
}

impl MdMlpModel {
    /// Patch split and shared embedding: `B×C×H×W → B×H'×W'×C×D`.
    pub fn embed<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let p = tape.patches(images, &self.geometry)?;
        self.embed.forward(tape, store, p)
    }

    /// Runs every block on a `B×H'×W'×C×D` activation.
    pub fn trunk<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        for block in &self.blocks {
            for layer in &block.layers {
                x = layer.forward(tape, store, x, mode, rng)?;
            }
        }
        Ok(x)
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let shape = tape.value(images)?.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected B×C×H×W images, got {shape:?}")));
        }
        let (x, field) = match &self.attn {
            Some(attn) => {
                let (y, v) = attn.forward(tape, store, images, mode, rng)?;
                (y, Some(v))
            }
            None => (images, None),
        };
        let e = self.embed(tape, store, x)?;
        let t = self.trunk(tape, store, e, mode, rng)?;
        let n = self.norm.forward(tape, store, t)?;
        let pooled = tape.mean(n, &[1, 2, 3])?;
        let logits = self.head.forward(tape, store, pooled)?;
        Ok(ForwardOutput { logits, field })
    }

    /// Every `fc2` weight and bias inside the trunk's mixing branches.
    pub fn branch_outputs(&self) -> Vec<crate::params::ParamId> {
        self.blocks.iter().flat_map(|b| &b.layers).flat_map(|l| [l.mlp.fc2.weight, l.mlp.fc2.bias]).collect()
    }
}

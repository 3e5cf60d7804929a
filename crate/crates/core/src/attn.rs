//! MDAttnTool: an MLP attention field over raw pixels.
//!
//! Two residual MLPs mix the image first along its width, then (after
//! swapping the last two axes) along its height. The change they make to the
//! image is averaged over channels and offset by one to give a per-pixel
//! weight field `V` of shape `1×H×W`, shared by every channel, and the output
//! is `V ⊙ X`. Both branches start with zero `fc2` parameters, so a fresh
//! tool has `V ≡ 1` and passes its input through unchanged.
//!
//! [`export_heatmap`] writes `|V|` as an 8-bit grayscale PGM.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Init, LayerNormUnit, MlpUnit, Mode};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Hidden width of both attention MLPs.
pub const ATTN_HIDDEN: usize = 8;

#[derive(Debug, Clone)]
pub struct AttnTool {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm_w: LayerNormUnit,
    pub mlp_w: MlpUnit,
    pub norm_h: LayerNormUnit,
    pub mlp_h: MlpUnit,
}

impl AttnTool {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let norm_w = LayerNormUnit::new(store, &format!("{name}.w.norm"), width)?;
        let mlp_w = MlpUnit::new(store, &format!("{name}.w.mlp"), width, ATTN_HIDDEN, dropout, Init::Zeros, rng)?;
        let norm_h = LayerNormUnit::new(store, &format!("{name}.h.norm"), height)?;
        let mlp_h = MlpUnit::new(store, &format!("{name}.h.mlp"), height, ATTN_HIDDEN, dropout, Init::Zeros, rng)?;
        Ok(Self { channels, height, width, norm_w, mlp_w, norm_h, mlp_h })
    }

    /// Returns `(V ⊙ X, V)` for `C×H×W` or `B×C×H×W` input. `V` has a size-1
    /// channel axis in place of `C`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x)?.shape().to_vec();
        let rank = shape.len();
        if !(rank == 3 || rank == 4) || shape[rank - 3..] != [self.channels, self.height, self.width] {
            return shape_err(format!(
                "attention tool expects (B×){}×{}×{}, got {shape:?}",
                self.channels, self.height, self.width
            ));
        }
        let mut swap: Vec<usize> = (0..rank).collect();
        swap.swap(rank - 2, rank - 1);

        let bw = self.norm_w.forward(tape, store, x)?;
        let bw = self.mlp_w.forward(tape, store, bw, mode, rng)?;
        let y1 = tape.add(x, bw)?;

        let y1t = tape.permute(y1, &swap)?;
        let bh = self.norm_h.forward(tape, store, y1t)?;
        let bh = self.mlp_h.forward(tape, store, bh, mode, rng)?;
        let y2t = tape.add(y1t, bh)?;
        let y2 = tape.permute(y2t, &swap)?;

        let delta = tape.sub(y2, x)?;
        let pooled = tape.mean(delta, &[rank - 3])?;
        let field = tape.add_scalar(pooled, 1.0)?;
        let mut field_shape = shape.clone();
        field_shape[rank - 3] = 1;
        let field = tape.reshape(field, &field_shape)?;
        let y = tape.mul(field, x)?;
        Ok((y, field))
    }

    pub fn num_params(height: usize, width: usize) -> usize {
        [width, height].iter().map(|&n| MlpUnit::num_params(n, ATTN_HIDDEN) + LayerNormUnit::num_params(n)).sum()
    }
}

/// `|V|` rescaled so its minimum maps to 0 and its maximum to 255, rounding
/// half away from zero. A constant field maps to all zeros. Accepts `H×W` or
/// any shape whose leading extents are 1.
pub fn heatmap_pixels<T: Scalar>(field: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = field.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&e| e != 1) {
        return shape_err(format!("heatmap needs an H×W field, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if !field.all_finite() {
        return Err(Error::NonFinite { param: "attention field".into(), max_abs: field.max_abs().as_f64() });
    }
    let abs: Vec<f64> = field.data().iter().map(|v| v.as_f64().abs()).collect();
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = abs
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    Ok((h, w, pixels))
}

/// Binary PGM: `P5\n<W> <H>\n255\n` followed by `H·W` bytes, top row first.
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn export_heatmap<T: Scalar>(field: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w, px) = heatmap_pixels(field)?;
    fs::write(path, encode_pgm(h, w, &px))?;
    Ok(())
}

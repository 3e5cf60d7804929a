//! Overlapping patch geometry and extraction.
//!
//! A `p × p` window slides over each channel with stride `O`, giving a
//! `H' × W'` grid where `H' = (H - p) / O + 1`. Windows overlap whenever
//! `O < p`. Pixels inside a window are flattened row-major (y, then x), so
//! the per-patch vector has `P = p²` entries per channel.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
    stride: usize,
}

impl PatchGeometry {
    /// Validates that `p` windows at stride `stride` tile the image exactly.
    /// No padding is ever inserted.
    pub fn new(height: usize, width: usize, channels: usize, patch: usize, stride: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Geometry("channel count must be at least 1".into()));
        }
        if stride == 0 || stride > patch {
            return Err(Error::Geometry(format!("overlap stride {stride} must satisfy 1 <= O <= p = {patch}")));
        }
        if patch > height.min(width) {
            return Err(Error::Geometry(format!("patch {patch} larger than image {height}x{width}")));
        }
        for (name, extent) in [("height", height), ("width", width)] {
            if !(extent - patch).is_multiple_of(stride) {
                return Err(Error::Geometry(format!(
                    "{name} {extent}: ({extent} - {patch}) is not divisible by overlap stride {stride}"
                )));
            }
        }
        Ok(Self { height, width, channels, patch, stride })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Window side `p`.
    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Step `O` between neighbouring window origins.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `H' = (H - p) / O + 1`.
    pub fn grid_height(&self) -> usize {
        (self.height - self.patch) / self.stride + 1
    }

    /// `W' = (W - p) / O + 1`.
    pub fn grid_width(&self) -> usize {
        (self.width - self.patch) / self.stride + 1
    }

    /// `P = p²`.
    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }

    fn batch_of(&self, shape: &[usize]) -> Result<usize> {
        let (b, rest) = match shape {
            [c, h, w] => (1, [*c, *h, *w]),
            [b, c, h, w] => (*b, [*c, *h, *w]),
            _ => return shape_err(format!("expected C×H×W or B×C×H×W, got {shape:?}")),
        };
        if rest != [self.channels, self.height, self.width] {
            return shape_err(format!(
                "image extents {rest:?} do not match geometry {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        Ok(b)
    }
}

/// Splits `C×H×W` into `H'×W'×C×P`, or `B×C×H×W` into `B×H'×W'×C×P`.
pub fn extract_overlapping_patches<T: Scalar>(image: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let batch = geom.batch_of(image.shape())?;
    let (gh, gw, c, p, o) = (geom.grid_height(), geom.grid_width(), geom.channels, geom.patch, geom.stride);
    let (h, w) = (geom.height, geom.width);
    let src = image.data();
    let mut out = Vec::with_capacity(batch * gh * gw * c * p * p);
    for b in 0..batch {
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for dy in 0..p {
                        let row = plane + (i * o + dy) * w + j * o;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    let shape: Vec<usize> = if image.rank() == 3 { vec![gh, gw, c, p * p] } else { vec![batch, gh, gw, c, p * p] };
    Tensor::new(&shape, out)
}

/// Adjoint of [`extract_overlapping_patches`]: scatters patch gradients back
/// onto the image, summing contributions of overlapping windows.
pub fn scatter_patches<T: Scalar>(
    patches: &Tensor<T>,
    geom: &PatchGeometry,
    image_shape: &[usize],
) -> Result<Tensor<T>> {
    let batch = geom.batch_of(image_shape)?;
    let (gh, gw, c, p, o) = (geom.grid_height(), geom.grid_width(), geom.channels, geom.patch, geom.stride);
    if patches.len() != batch * gh * gw * c * p * p {
        return shape_err(format!("patch tensor {:?} does not match geometry", patches.shape()));
    }
    let (h, w) = (geom.height, geom.width);
    let mut img = vec![T::zero(); batch * c * h * w];
    let src = patches.data();
    let mut k = 0;
    for b in 0..batch {
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for dy in 0..p {
                        let row = plane + (i * o + dy) * w + j * o;
                        for (dst, &g) in img[row..row + p].iter_mut().zip(&src[k..k + p]) {
                            *dst += g;
                        }
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(image_shape, img)
}

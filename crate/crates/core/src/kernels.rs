//! Packed, register-tiled matrix product used by the linear layers.
//!
//! Every output accumulates its products in increasing `k` order onto its
//! initial value with separate multiply and add, so results are
//! bit-identical to the naive triple loop on every CPU.

use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 16;
/// Depth of one packed panel.
const KC: usize = 256;

/// A matrix operand read through explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Scalar> Strided<'a, T> {
    /// Row-major `rows × cols`.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// Transpose of a row-major `rows × cols` buffer, read as `cols × rows`.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]` with `out` row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: Strided<'_, T>, b: Strided<'_, T>, out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(out.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports every feature enabled on the callee.
            unsafe { gemm_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    gemm_generic(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar>(a: Strided<'_, T>, b: Strided<'_, T>, out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_generic(a, b, out, m, k, n)
}

#[inline(always)]
fn gemm_generic<T: Scalar>(a: Strided<'_, T>, b: Strided<'_, T>, out: &mut [T], m: usize, k: usize, n: usize) {
    let n_panels = n.div_ceil(NR);
    let depth = KC.min(k);
    let mut bpack = vec![T::zero(); n_panels * depth * NR];
    let mut apack = vec![T::zero(); depth * MR];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        // B panels: [panel][kk][NR], zero-padded past column n.
        for p in 0..n_panels {
            let j0 = p * NR;
            let nr = NR.min(n - j0);
            let panel = &mut bpack[p * depth * NR..(p * depth + kc) * NR];
            for (kk, dst) in panel.chunks_exact_mut(NR).enumerate() {
                let row = (k0 + kk) * b.row_stride + j0 * b.col_stride;
                if b.col_stride == 1 {
                    dst[..nr].copy_from_slice(&b.data[row..row + nr]);
                } else {
                    for (j, d) in dst[..nr].iter_mut().enumerate() {
                        *d = b.data[row + j * b.col_stride];
                    }
                }
                dst[nr..].fill(T::zero());
            }
        }
        for i0 in (0..m).step_by(MR) {
            let mr = MR.min(m - i0);
            // A sliver: [kk][MR], zero-padded past row m.
            for (kk, dst) in apack[..kc * MR].chunks_exact_mut(MR).enumerate() {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = if i < mr { a.data[(i0 + i) * a.row_stride + (k0 + kk) * a.col_stride] } else { T::zero() };
                }
            }
            for p in 0..n_panels {
                let j0 = p * NR;
                let nr = NR.min(n - j0);
                let mut acc = [[T::zero(); NR]; MR];
                for (i, row) in acc.iter_mut().enumerate().take(mr) {
                    row[..nr].copy_from_slice(&out[(i0 + i) * n + j0..(i0 + i) * n + j0 + nr]);
                }
                micro(&apack[..kc * MR], &bpack[p * depth * NR..(p * depth + kc) * NR], &mut acc);
                for (i, row) in acc.iter().enumerate().take(mr) {
                    out[(i0 + i) * n + j0..(i0 + i) * n + j0 + nr].copy_from_slice(&row[..nr]);
                }
            }
        }
    }
}

#[inline(always)]
fn micro<T: Scalar>(apack: &[T], bpack: &[T], acc: &mut [[T; NR]; MR]) {
    for (av, bv) in apack.chunks_exact(MR).zip(bpack.chunks_exact(NR)) {
        for i in 0..MR {
            let x = av[i];
            for j in 0..NR {
                acc[i][j] += x * bv[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_naive_order_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(1, 1, 1), (4, 8, 16), (7, 300, 13), (9, 5, 17), (33, 600, 3), (6, 257, 40)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let init: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut naive = init.clone();
            for i in 0..m {
                for j in 0..n {
                    for kk in 0..k {
                        naive[i * n + j] += a[i * k + kk] * b[kk * n + j];
                    }
                }
            }
            let mut out = init.clone();
            gemm_acc(Strided::rows(&a, k), Strided::rows(&b, n), &mut out, m, k, n);
            assert_eq!(out, naive, "{m}x{k}x{n}");

            // Same product with both operands stored transposed.
            let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
            let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
            let mut out = init;
            gemm_acc(Strided::transposed(&at, m), Strided::transposed(&bt, k), &mut out, m, k, n);
            assert_eq!(out, naive);
        }
    }
}

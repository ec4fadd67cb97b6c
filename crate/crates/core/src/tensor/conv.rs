//! Stride-1 2-D cross-correlation kernels on single images.
//!
//! Every kernel picks between two lowerings onto GEMM, expanding whichever
//! operand has fewer channels into a column matrix. Both lowerings compute
//! the same sums, so the choice only affects speed (and rounding order).

use super::scalar::{gemm_into, MatRef};
use super::Scalar;

/// Geometry of one stride-1 correlation `x[C,H,W] * w[F,C,k,k] -> y[F,Ho,Wo]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn expand_input(&self) -> bool {
        self.c <= self.f
    }
}

/// Lowering strategy; `Auto` picks by channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lowering {
    Auto,
    ExpandInput,
    ExpandOutput,
}

impl Lowering {
    fn expand_input(self, g: &ConvGeom) -> bool {
        match self {
            Lowering::Auto => g.expand_input(),
            Lowering::ExpandInput => true,
            Lowering::ExpandOutput => false,
        }
    }
}

/// Valid destination range `[lo, hi)` for a shift: `src = dst + shift` must
/// lie in `[0, src_len)`.
#[inline]
fn valid_range(shift: isize, src_len: usize, dst_len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (src_len as isize - shift).clamp(0, dst_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Column expansion: `dst[(ch,ky,kx), (y,x)] = src[ch, y + s*ky + b, x + s*kx + b]`
/// (zero where out of range).
#[allow(clippy::too_many_arguments)]
fn expand<T: Scalar>(
    src: &[T],
    n_ch: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    k: usize,
    s: isize,
    b: isize,
) -> Vec<T> {
    let plane = dh * dw;
    let mut dst = vec![T::zero(); n_ch * k * k * plane];
    for ch in 0..n_ch {
        let src_ch = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for ky in 0..k {
            let shift_y = s * ky as isize + b;
            let (y_lo, y_hi) = valid_range(shift_y, sh, dh);
            for kx in 0..k {
                let shift_x = s * kx as isize + b;
                let (x_lo, x_hi) = valid_range(shift_x, sw, dw);
                let row = (ch * k + ky) * k + kx;
                let dst_row = &mut dst[row * plane..(row + 1) * plane];
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let ys = (y as isize + shift_y) as usize;
                    let xs = (x_lo as isize + shift_x) as usize;
                    let n = x_hi - x_lo;
                    dst_row[y * dw + x_lo..y * dw + x_hi]
                        .copy_from_slice(&src_ch[ys * sw + xs..ys * sw + xs + n]);
                }
            }
        }
    }
    dst
}

/// Shifted accumulation: `out[ch, y, x] += sum_{ky,kx} t[(ch,ky,kx), y + s*ky + b, x + s*kx + b]`.
#[allow(clippy::too_many_arguments)]
fn gather_add<T: Scalar>(
    t: &[T],
    n_ch: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    k: usize,
    s: isize,
    b: isize,
    out: &mut [T],
) {
    let src_plane = sh * sw;
    for ch in 0..n_ch {
        let out_ch = &mut out[ch * dh * dw..(ch + 1) * dh * dw];
        for ky in 0..k {
            let shift_y = s * ky as isize + b;
            let (y_lo, y_hi) = valid_range(shift_y, sh, dh);
            for kx in 0..k {
                let shift_x = s * kx as isize + b;
                let (x_lo, x_hi) = valid_range(shift_x, sw, dw);
                if x_lo >= x_hi {
                    continue;
                }
                let row = (ch * k + ky) * k + kx;
                let t_row = &t[row * src_plane..(row + 1) * src_plane];
                for y in y_lo..y_hi {
                    let ys = (y as isize + shift_y) as usize;
                    let xs = (x_lo as isize + shift_x) as usize;
                    let n = x_hi - x_lo;
                    let dst = &mut out_ch[y * dw + x_lo..y * dw + x_hi];
                    let src = &t_row[ys * sw + xs..ys * sw + xs + n];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `y[f] = sum_c w[f,c] (*) x[c]`, returns `[F, Ho, Wo]`.
pub fn forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, lowering: Lowering) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    let p = g.pad as isize;
    let mut y = vec![T::zero(); g.f * ho * wo];
    if lowering.expand_input(g) {
        let cols = expand(x, g.c, g.h, g.w, ho, wo, g.k, 1, -p);
        gemm_into(
            MatRef::row_major(w, g.f, g.c * kk),
            MatRef::row_major(&cols, g.c * kk, ho * wo),
            &mut y,
            false,
        );
    } else {
        let hw = g.h * g.w;
        let mut t = vec![T::zero(); g.f * kk * hw];
        for f in 0..g.f {
            let w_f = MatRef {
                data: &w[f * g.c * kk..(f + 1) * g.c * kk],
                rows: kk,
                cols: g.c,
                row_stride: 1,
                col_stride: kk as isize,
            };
            gemm_into(
                w_f,
                MatRef::row_major(x, g.c, hw),
                &mut t[f * kk * hw..(f + 1) * kk * hw],
                false,
            );
        }
        gather_add(&t, g.f, g.h, g.w, ho, wo, g.k, 1, -p, &mut y);
    }
    y
}

/// Gradient w.r.t. the input: `dx[C, H, W]` from `dy[F, Ho, Wo]`.
pub fn backward_data<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom, lowering: Lowering) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    let p = g.pad as isize;
    let hw = g.h * g.w;
    let mut dx = vec![T::zero(); g.c * hw];
    // Expanding `dy` is the cheap side when F <= C.
    if !lowering.expand_input(&ConvGeom { c: g.f, f: g.c, ..*g }) {
        let mut t = vec![T::zero(); g.c * kk * ho * wo];
        let w_t = MatRef {
            data: w,
            rows: g.c * kk,
            cols: g.f,
            row_stride: 1,
            col_stride: (g.c * kk) as isize,
        };
        gemm_into(w_t, MatRef::row_major(dy, g.f, ho * wo), &mut t, false);
        gather_add(&t, g.c, ho, wo, g.h, g.w, g.k, -1, p, &mut dx);
    } else {
        let cols = expand(dy, g.f, ho, wo, g.h, g.w, g.k, -1, p);
        let mut w_perm = vec![T::zero(); w.len()];
        for f in 0..g.f {
            for c in 0..g.c {
                let src = &w[(f * g.c + c) * kk..(f * g.c + c + 1) * kk];
                w_perm[(c * g.f + f) * kk..(c * g.f + f + 1) * kk].copy_from_slice(src);
            }
        }
        gemm_into(
            MatRef::row_major(&w_perm, g.c, g.f * kk),
            MatRef::row_major(&cols, g.f * kk, hw),
            &mut dx,
            false,
        );
    }
    dx
}

/// Gradient w.r.t. the weights: `dw[F, C, k, k]`.
pub fn backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom, lowering: Lowering) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    let p = g.pad as isize;
    let hw = g.h * g.w;
    let mut dw = vec![T::zero(); g.f * g.c * kk];
    if lowering.expand_input(g) {
        let cols = expand(x, g.c, g.h, g.w, ho, wo, g.k, 1, -p);
        gemm_into(
            MatRef::row_major(dy, g.f, ho * wo),
            MatRef::row_major(&cols, g.c * kk, ho * wo).t(),
            &mut dw,
            false,
        );
    } else {
        let cols = expand(dy, g.f, ho, wo, g.h, g.w, g.k, -1, p);
        let mut gmat = vec![T::zero(); g.f * kk * g.c];
        gemm_into(
            MatRef::row_major(&cols, g.f * kk, hw),
            MatRef::row_major(x, g.c, hw).t(),
            &mut gmat,
            false,
        );
        for f in 0..g.f {
            for j in 0..kk {
                for c in 0..g.c {
                    dw[(f * g.c + c) * kk + j] = gmat[(f * kk + j) * g.c + c];
                }
            }
        }
    }
    dw
}

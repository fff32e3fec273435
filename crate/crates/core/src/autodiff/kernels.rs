//! Slice-level forward/backward kernels for the spatial ops.
//!
//! Layout is always NCHW, row-major.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            out,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Columns of the unfolded patch matrix.
    pub fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + kk - pad` falls inside `0..len`.
fn valid_range(len: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if len + pad > kk { (len + pad - kk).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold `x` into a `(C*k*k, N*Ho*Wo)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let cols_n = g.positions();
    let mut cols = vec![T::zero(); g.patch() * cols_n];
    for c in 0..g.c {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let iw_lo = ow_lo * g.stride + kj - g.pad;
                let width = ow_hi - ow_lo;
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let src_row = &src[ih * g.w..(ih + 1) * g.w];
                        let d = &mut dst[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                        if g.stride == 1 {
                            d.copy_from_slice(&src_row[iw_lo..iw_lo + width]);
                        } else {
                            for (dv, sv) in d.iter_mut().zip(src_row[iw_lo..].iter().step_by(g.stride)) {
                                *dv = *sv;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input, accumulating.
pub fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    let cols_n = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let iw_lo = ow_lo * g.stride + kj - g.pad;
                let width = ow_hi - ow_lo;
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &dcols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let s = &src[oh * g.wo + ow_lo..oh * g.wo + ow_hi];
                        let d = &mut dst[ih * g.w..(ih + 1) * g.w];
                        if g.stride == 1 {
                            for (dv, sv) in d[iw_lo..iw_lo + width].iter_mut().zip(s) {
                                *dv += *sv;
                            }
                        } else {
                            for (dv, sv) in d[iw_lo..].iter_mut().step_by(g.stride).zip(s) {
                                *dv += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward from an unfolded patch matrix. Returns NCHW output.
pub fn conv_forward<T: Scalar>(cols: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (patch, pos, hw) = (g.patch(), g.positions(), g.ho * g.wo);
    // (O, N*HoWo) then scatter into (N, O, HoWo)
    let mut tmp = vec![T::zero(); g.out * pos];
    T::gemm(
        g.out,
        patch,
        pos,
        T::one(),
        weight,
        (patch as isize, 1),
        cols,
        (pos as isize, 1),
        T::zero(),
        &mut tmp,
        (pos as isize, 1),
    );
    let mut y = vec![T::zero(); g.n * g.out * hw];
    for o in 0..g.out {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for n in 0..g.n {
            let src = &tmp[o * pos + n * hw..o * pos + (n + 1) * hw];
            let dst = &mut y[(n * g.out + o) * hw..(n * g.out + o + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dcols: Vec<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

/// `dcols` is left empty when `need_dx` is false.
pub fn conv_backward<T: Scalar>(dy: &[T], cols: &[T], weight: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let (patch, pos, hw) = (g.patch(), g.positions(), g.ho * g.wo);
    let mut dyp = vec![T::zero(); g.out * pos];
    let mut dbias = vec![T::zero(); g.out];
    for n in 0..g.n {
        for o in 0..g.out {
            let src = &dy[(n * g.out + o) * hw..(n * g.out + o + 1) * hw];
            dyp[o * pos + n * hw..o * pos + (n + 1) * hw].copy_from_slice(src);
            dbias[o] += src.iter().copied().sum::<T>();
        }
    }
    let mut dweight = vec![T::zero(); g.out * patch];
    T::gemm(
        g.out,
        pos,
        patch,
        T::one(),
        &dyp,
        (pos as isize, 1),
        cols,
        (1, pos as isize),
        T::zero(),
        &mut dweight,
        (patch as isize, 1),
    );
    if !need_dx {
        return ConvGrads {
            dcols: Vec::new(),
            dweight,
            dbias,
        };
    }
    let mut dcols = vec![T::zero(); patch * pos];
    T::gemm(
        patch,
        g.out,
        pos,
        T::one(),
        weight,
        (1, patch as isize),
        &dyp,
        (pos as isize, 1),
        T::zero(),
        &mut dcols,
        (pos as isize, 1),
    );
    ConvGrads {
        dcols,
        dweight,
        dbias,
    }
}

pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    dx
}

/// Per-plane population mean and standard deviation, the latter floored at `eps`.
pub fn plane_stats<T: Scalar>(plane: &[T], eps: T) -> (T, T, bool) {
    let n = T::from_usize(plane.len()).unwrap();
    let mean = plane.iter().copied().sum::<T>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std > eps {
        (mean, std, false)
    } else {
        (mean, eps, true)
    }
}

pub struct AdaInForward<T> {
    pub y: Vec<T>,
    /// Normalized content, same layout as the input.
    pub xhat: Vec<T>,
    /// Per-plane `1/sigma`.
    pub inv_std: Vec<T>,
    /// Whether sigma hit the floor for each plane.
    pub floored: Vec<bool>,
}

pub fn adain_forward<T: Scalar>(
    x: &[T],
    mean: &[T],
    std: &[T],
    planes: usize,
    hw: usize,
    eps: T,
) -> AdaInForward<T> {
    let mut y = vec![T::zero(); planes * hw];
    let mut xhat = vec![T::zero(); planes * hw];
    let mut inv_std = vec![T::zero(); planes];
    let mut floored = vec![false; planes];
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let (mu, sigma, fl) = plane_stats(src, eps);
        let inv = T::one() / sigma;
        inv_std[p] = inv;
        floored[p] = fl;
        for i in 0..hw {
            let z = (src[i] - mu) * inv;
            xhat[p * hw + i] = z;
            y[p * hw + i] = std[p] * z + mean[p];
        }
    }
    AdaInForward {
        y,
        xhat,
        inv_std,
        floored,
    }
}

pub struct AdaInGrads<T> {
    pub dx: Vec<T>,
    pub dmean: Vec<T>,
    pub dstd: Vec<T>,
}

pub fn adain_backward<T: Scalar>(
    dy: &[T],
    fwd_xhat: &[T],
    inv_std: &[T],
    floored: &[bool],
    std: &[T],
    planes: usize,
    hw: usize,
) -> AdaInGrads<T> {
    let n = T::from_usize(hw).unwrap();
    let mut dx = vec![T::zero(); planes * hw];
    let mut dmean = vec![T::zero(); planes];
    let mut dstd = vec![T::zero(); planes];
    for p in 0..planes {
        let g = &dy[p * hw..(p + 1) * hw];
        let z = &fwd_xhat[p * hw..(p + 1) * hw];
        let mut sum_g = T::zero();
        let mut sum_gz = T::zero();
        for i in 0..hw {
            sum_g += g[i];
            sum_gz += g[i] * z[i];
        }
        dmean[p] = sum_g;
        dstd[p] = sum_gz;
        // d xhat = g * gamma
        let gamma = std[p];
        let mean_dz = gamma * sum_g / n;
        let mean_dz_z = gamma * sum_gz / n;
        let inv = inv_std[p];
        let out = &mut dx[p * hw..(p + 1) * hw];
        for i in 0..hw {
            let dz = gamma * g[i];
            out[i] = if floored[p] {
                (dz - mean_dz) * inv
            } else {
                (dz - mean_dz - z[i] * mean_dz_z) * inv
            };
        }
    }
    AdaInGrads { dx, dmean, dstd }
}

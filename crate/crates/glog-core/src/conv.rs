//! Plain 2-D cross-correlation loops shared by the tape op and the
//! analytic filter-bank gradients.
//!
//! Convention: cross-correlation (no kernel flip), zero padding. Two
//! execution paths with identical semantics: a direct shift-and-accumulate
//! path for few output channels (the filter bank, the class head) and an
//! im2col + GEMM path for the many-channel block convolutions, where the
//! long contiguous inner loops are what keeps the f64 math vectorized.

use crate::scalar::Scalar;

/// Below this output-channel count the direct path wins (per-pixel GEMM
/// rows would be too short to vectorize well).
const GEMM_MIN_COUT: usize = 16;

/// Output spatial extent of a padded, strided cross-correlation.
#[inline]
pub(crate) fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Cross-correlate `x[cin,h,w]` with `kernels[cout,cin,k,k]` into
/// `out[cout,oh,ow]`, `oh = (h + 2p - k)/s + 1`.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    kernels: &[T],
    kd: (usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let (cin, h, w) = dims;
    let (cout, k) = kd;
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(kernels.len(), cout * cin * k * k);
    debug_assert_eq!(out.len(), cout * oh * ow);

    if cout >= GEMM_MIN_COUT {
        forward_gemm(x, dims, kernels, kd, stride, pad, out);
    } else {
        forward_direct(x, dims, kernels, kd, stride, pad, out);
    }
}

/// Gradient with respect to the input, given `gout[cout,oh,ow]`. Adds
/// into `dx`.
pub(crate) fn input_grad<T: Scalar>(
    gout: &[T],
    dims: (usize, usize, usize),
    kernels: &[T],
    kd: (usize, usize),
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let (cin, h, w) = dims;
    let (cout, k) = kd;
    debug_assert_eq!(dx.len(), cin * h * w);
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    let npix = oh * ow;
    let patch = cin * k * k;

    // dP = G_pixel @ K, then scatter the patch rows back.
    let mut dp = vec![T::zero(); npix * patch];
    for co in 0..cout {
        let g_plane = &gout[co * npix..(co + 1) * npix];
        let k_row = &kernels[co * patch..(co + 1) * patch];
        for (i, &g) in g_plane.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let dp_row = &mut dp[i * patch..(i + 1) * patch];
            for (d, &kv) in dp_row.iter_mut().zip(k_row) {
                *d += g * kv;
            }
        }
    }
    col2im_add(&dp, dims, k, stride, pad, dx);
}

/// Gradient with respect to the kernels. Adds into `dk`.
pub(crate) fn kernel_grad<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    gout: &[T],
    kd: (usize, usize),
    stride: usize,
    pad: usize,
    dk: &mut [T],
) {
    let (cin, h, w) = dims;
    let (cout, k) = kd;
    debug_assert_eq!(dk.len(), cout * cin * k * k);
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    let npix = oh * ow;
    let patch = cin * k * k;

    // dK[c,:] = sum_pixels gout[c,i] * P[i,:].
    let p = im2col(x, dims, k, stride, pad);
    for co in 0..cout {
        let g_plane = &gout[co * npix..(co + 1) * npix];
        let dk_row = &mut dk[co * patch..(co + 1) * patch];
        for (i, &g) in g_plane.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let p_row = &p[i * patch..(i + 1) * patch];
            for (d, &pv) in dk_row.iter_mut().zip(p_row) {
                *d += g * pv;
            }
        }
    }
}

/// Patch matrix `[oh*ow, cin*k*k]`: row `i` holds the receptive field of
/// output pixel `i` (zeros where the padding reaches outside the image).
fn im2col<T: Scalar>(
    x: &[T],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    let patch = cin * k * k;
    let mut p = vec![T::zero(); oh * ow * patch];
    for ci in 0..cin {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                let col = (ci * k + ky) * k + kx;
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let x_row = &x_plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        p[(oy * ow + ox) * patch + col] = x_row[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    p
}

/// Inverse of [`im2col`]: scatter-add patch rows back onto the image.
fn col2im_add<T: Scalar>(
    cols: &[T],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    let patch = cin * k * k;
    for ci in 0..cin {
        let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                let col = (ci * k + ky) * k + kx;
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let dx_row = &mut dx_plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dx_row[ox * stride + kx - pad] += cols[(oy * ow + ox) * patch + col];
                    }
                }
            }
        }
    }
}

/// im2col + GEMM forward: `out[c, i] = sum_p P[i, p] K[c, p]`.
fn forward_gemm<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    kernels: &[T],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let (cin, h, w) = dims;
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    let npix = oh * ow;
    let patch = cin * k * k;
    let p = im2col(x, dims, k, stride, pad);

    if npix <= 64 {
        // Few pixels: a row-dot per output value; the patch matrix stays
        // cache-resident and no transpose is needed.
        for c in 0..cout {
            let k_row = &kernels[c * patch..(c + 1) * patch];
            let out_plane = &mut out[c * npix..(c + 1) * npix];
            for (i, o) in out_plane.iter_mut().enumerate() {
                let p_row = &p[i * patch..(i + 1) * patch];
                *o = dot_unrolled(k_row, p_row);
            }
        }
        return;
    }

    // Many pixels: stream the patch matrix once, accumulating into a
    // channel-contiguous row per pixel against the transposed kernels.
    let mut kt = vec![T::zero(); patch * cout];
    for c in 0..cout {
        for pp in 0..patch {
            kt[pp * cout + c] = kernels[c * patch + pp];
        }
    }
    let mut pixel_major = vec![T::zero(); npix * cout];
    for i in 0..npix {
        let p_row = &p[i * patch..(i + 1) * patch];
        let out_row = &mut pixel_major[i * cout..(i + 1) * cout];
        for (pp, &pv) in p_row.iter().enumerate() {
            if pv == T::zero() {
                continue;
            }
            let kt_row = &kt[pp * cout..(pp + 1) * cout];
            for (o, &kv) in out_row.iter_mut().zip(kt_row) {
                *o += pv * kv;
            }
        }
    }
    for i in 0..npix {
        for c in 0..cout {
            out[c * npix + i] = pixel_major[i * cout + c];
        }
    }
}

#[inline]
fn dot_unrolled<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    for j in chunks * 4..a.len() {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn forward_direct<T: Scalar>(
    x: &[T],
    (cin, h, w): (usize, usize, usize),
    kernels: &[T],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(w, k, stride, pad);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for co in 0..cout {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let weight = kernels[((co * cin + ci) * k + ky) * k + kx];
                    if weight == T::zero() {
                        continue;
                    }
                    let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                    let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let x_row = &x_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx.wrapping_sub(pad);
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += weight * x_row[ox.wrapping_add(off)];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += weight * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output index range `[lo, hi)` for one kernel offset so that the
/// sampled input index stays inside `[0, input)`.
#[inline]
fn valid_range(
    input: usize,
    koff: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> (usize, usize) {
    // input index = o*stride + koff - pad
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    let max_in = input + pad;
    let hi = if max_in > koff {
        (((max_in - koff - 1) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

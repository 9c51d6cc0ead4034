//! Convolution kernels (im2col + GEMM), resampling and activations, each with
//! its adjoint.

use rayon::prelude::*;

use super::{gemm, Mat, Real};
use crate::volume::{voxel_count, Dims};

/// `E[silu(z)^2]^(1/2)` for standard normal `z`.
pub const MP_SILU_SCALE: f64 = 0.596;

/// Upper bound on the im2col buffer per slab, in elements.
const COL_BUDGET: usize = 1 << 22;

#[inline]
pub fn mp_silu<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    x * s / T::lit(MP_SILU_SCALE)
}

#[inline]
pub fn mp_silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    (s + x * s * (T::one() - s)) / T::lit(MP_SILU_SCALE)
}

/// Splits `[0, nz)` into slabs whose im2col buffers stay within budget.
fn slabs(dims: Dims, rows: usize) -> Vec<(usize, usize)> {
    let plane = dims[0] * dims[1];
    let per = (COL_BUDGET / (rows * plane).max(1)).max(1);
    (0..dims[2])
        .step_by(per)
        .map(|z0| (z0, (z0 + per).min(dims[2])))
        .collect()
}

/// 3x3x3 zero-padded patches of z-slab `[z0, z1)` as a `(cin*27) x len` matrix.
fn im2col3<T: Real>(x: &[T], cin: usize, dims: Dims, z0: usize, z1: usize, cols: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let len = (z1 - z0) * ny * nx;
    debug_assert_eq!(cols.len(), cin * 27 * len);
    for ci in 0..cin {
        let src = &x[ci * n..(ci + 1) * n];
        for tap in 0..27 {
            let (kz, ky, kx) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &mut cols[(ci * 27 + tap) * len..(ci * 27 + tap + 1) * len];
            for z in z0..z1 {
                let sz = z as isize + kz as isize - 1;
                for y in 0..ny {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[((z - z0) * ny + y) * nx..((z - z0) * ny + y + 1) * nx];
                    if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let base = (sz as usize * ny + sy as usize) * nx;
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[base..base + nx - 1]);
                        }
                        1 => dst.copy_from_slice(&src[base..base + nx]),
                        _ => {
                            dst[..nx - 1].copy_from_slice(&src[base + 1..base + nx]);
                            dst[nx - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters-adds columns back onto `dx`.
fn col2im3<T: Real>(cols: &[T], cin: usize, dims: Dims, z0: usize, z1: usize, dx: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let len = (z1 - z0) * ny * nx;
    for ci in 0..cin {
        let dst = &mut dx[ci * n..(ci + 1) * n];
        for tap in 0..27 {
            let (kz, ky, kx) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &cols[(ci * 27 + tap) * len..(ci * 27 + tap + 1) * len];
            for z in z0..z1 {
                let sz = z as isize + kz as isize - 1;
                if sz < 0 || sz >= nz as isize {
                    continue;
                }
                for y in 0..ny {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let base = (sz as usize * ny + sy as usize) * nx;
                    let src = &row[((z - z0) * ny + y) * nx..((z - z0) * ny + y + 1) * nx];
                    match kx {
                        0 => {
                            for (d, &s) in dst[base..base + nx - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst[base..base + nx].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[base + 1..base + nx].iter_mut().zip(&src[..nx - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], n: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], gb: &mut [T], n: usize) {
    for (c, g) in gb.iter_mut().enumerate() {
        *g += dy[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1. `w` is `cout x (cin*27)`.
pub(crate) fn conv3_forward<T: Real>(
    x: &[T],
    cin: usize,
    dims: Dims,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let n = voxel_count(dims);
    let k = cin * 27;
    let plane = dims[0] * dims[1];
    let parts: Vec<(usize, Vec<T>)> = slabs(dims, k)
        .into_par_iter()
        .map(|(z0, z1)| {
            let len = (z1 - z0) * plane;
            let mut cols = vec![T::zero(); k * len];
            im2col3(x, cin, dims, z0, z1, &mut cols);
            let mut out = vec![T::zero(); cout * len];
            gemm(
                T::one(),
                Mat::row_major(w, cout, k, k),
                Mat::row_major(&cols, k, len, len),
                T::zero(),
                &mut out,
                len,
            );
            (z0 * plane, out)
        })
        .collect();
    let mut y = vec![T::zero(); cout * n];
    for (start, part) in parts {
        let len = part.len() / cout;
        for c in 0..cout {
            y[c * n + start..c * n + start + len].copy_from_slice(&part[c * len..(c + 1) * len]);
        }
    }
    add_bias(&mut y, b, n);
    y
}

/// Accumulates weight/bias gradients; returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward<T: Real>(
    x: &[T],
    cin: usize,
    dims: Dims,
    w: &[T],
    cout: usize,
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let n = voxel_count(dims);
    let k = cin * 27;
    let plane = dims[0] * dims[1];
    let mut dx = need_dx.then(|| vec![T::zero(); cin * n]);
    for (z0, z1) in slabs(dims, k) {
        let len = (z1 - z0) * plane;
        let off = z0 * plane;
        let mut cols = vec![T::zero(); k * len];
        im2col3(x, cin, dims, z0, z1, &mut cols);
        let dy_slab = Mat::row_major(&dy[off..], cout, len, n);
        gemm(
            T::one(),
            dy_slab,
            Mat::row_major(&cols, k, len, len).t(),
            T::one(),
            gw,
            k,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                Mat::row_major(w, cout, k, k).t(),
                dy_slab,
                T::zero(),
                &mut cols,
                len,
            );
            col2im3(&cols, cin, dims, z0, z1, dx);
        }
    }
    bias_grad(dy, gb, n);
    dx
}

pub(crate) fn half_dims(dims: Dims) -> Dims {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

fn im2col2<T: Real>(x: &[T], cin: usize, dims: Dims, cols: &mut [T]) {
    let n = voxel_count(dims);
    let o = half_dims(dims);
    let len = voxel_count(o);
    for ci in 0..cin {
        let src = &x[ci * n..(ci + 1) * n];
        for tap in 0..8 {
            let (kz, ky, kx) = (tap / 4, (tap / 2) % 2, tap % 2);
            let row = &mut cols[(ci * 8 + tap) * len..(ci * 8 + tap + 1) * len];
            let mut j = 0;
            for z in 0..o[2] {
                for y in 0..o[1] {
                    let base = ((2 * z + kz) * dims[1] + 2 * y + ky) * dims[0] + kx;
                    for x in 0..o[0] {
                        row[j] = src[base + 2 * x];
                        j += 1;
                    }
                }
            }
        }
    }
}

fn col2im2<T: Real>(cols: &[T], cin: usize, dims: Dims, dx: &mut [T]) {
    let n = voxel_count(dims);
    let o = half_dims(dims);
    let len = voxel_count(o);
    for ci in 0..cin {
        let dst = &mut dx[ci * n..(ci + 1) * n];
        for tap in 0..8 {
            let (kz, ky, kx) = (tap / 4, (tap / 2) % 2, tap % 2);
            let row = &cols[(ci * 8 + tap) * len..(ci * 8 + tap + 1) * len];
            let mut j = 0;
            for z in 0..o[2] {
                for y in 0..o[1] {
                    let base = ((2 * z + kz) * dims[1] + 2 * y + ky) * dims[0] + kx;
                    for x in 0..o[0] {
                        dst[base + 2 * x] += row[j];
                        j += 1;
                    }
                }
            }
        }
    }
}

/// 2x2x2 convolution with stride 2 (learned downsampling).
pub(crate) fn down2_forward<T: Real>(
    x: &[T],
    cin: usize,
    dims: Dims,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let len = voxel_count(half_dims(dims));
    let k = cin * 8;
    let mut cols = vec![T::zero(); k * len];
    im2col2(x, cin, dims, &mut cols);
    let mut y = vec![T::zero(); cout * len];
    gemm(
        T::one(),
        Mat::row_major(w, cout, k, k),
        Mat::row_major(&cols, k, len, len),
        T::zero(),
        &mut y,
        len,
    );
    add_bias(&mut y, b, len);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn down2_backward<T: Real>(
    x: &[T],
    cin: usize,
    dims: Dims,
    w: &[T],
    cout: usize,
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let len = voxel_count(half_dims(dims));
    let k = cin * 8;
    let mut cols = vec![T::zero(); k * len];
    im2col2(x, cin, dims, &mut cols);
    let dy_m = Mat::row_major(dy, cout, len, len);
    gemm(T::one(), dy_m, Mat::row_major(&cols, k, len, len).t(), T::one(), gw, k);
    gemm(T::one(), Mat::row_major(w, cout, k, k).t(), dy_m, T::zero(), &mut cols, len);
    let mut dx = vec![T::zero(); cin * voxel_count(dims)];
    col2im2(&cols, cin, dims, &mut dx);
    bias_grad(dy, gb, len);
    dx
}

/// 1x1x1 convolution: `y = W x + b` per voxel.
pub(crate) fn point_forward<T: Real>(x: &[T], cin: usize, n: usize, w: &[T], b: &[T], cout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); cout * n];
    gemm(
        T::one(),
        Mat::row_major(w, cout, cin, cin),
        Mat::row_major(x, cin, n, n),
        T::zero(),
        &mut y,
        n,
    );
    add_bias(&mut y, b, n);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn point_backward<T: Real>(
    x: &[T],
    cin: usize,
    n: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let dy_m = Mat::row_major(dy, cout, n, n);
    gemm(T::one(), dy_m, Mat::row_major(x, cin, n, n).t(), T::one(), gw, cin);
    let mut dx = vec![T::zero(); cin * n];
    gemm(T::one(), Mat::row_major(w, cout, cin, cin).t(), dy_m, T::zero(), &mut dx, n);
    bias_grad(dy, gb, n);
    dx
}

/// Nearest-neighbour ×2 upsampling from `dims` to `2 * dims`.
pub(crate) fn upsample2<T: Real>(x: &[T], c: usize, dims: Dims) -> Vec<T> {
    let big = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let (n, nb) = (voxel_count(dims), voxel_count(big));
    let mut y = vec![T::zero(); c * nb];
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let dst = &mut y[ch * nb..(ch + 1) * nb];
        for z in 0..big[2] {
            for yy in 0..big[1] {
                let s = ((z / 2) * dims[1] + yy / 2) * dims[0];
                let d = (z * big[1] + yy) * big[0];
                for x in 0..big[0] {
                    dst[d + x] = src[s + x / 2];
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 block. `dims` is the small grid.
pub(crate) fn upsample2_adjoint<T: Real>(dy: &[T], c: usize, dims: Dims) -> Vec<T> {
    let big = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let (n, nb) = (voxel_count(dims), voxel_count(big));
    let mut dx = vec![T::zero(); c * n];
    for ch in 0..c {
        let src = &dy[ch * nb..(ch + 1) * nb];
        let dst = &mut dx[ch * n..(ch + 1) * n];
        for z in 0..big[2] {
            for yy in 0..big[1] {
                let s = ((z / 2) * dims[1] + yy / 2) * dims[0];
                let d = (z * big[1] + yy) * big[0];
                for x in 0..big[0] {
                    dst[s + x / 2] += src[d + x];
                }
            }
        }
    }
    dx
}

//! Slice-level numeric kernels behind the graph ops.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible;
//! with the `parallel` feature work is split per example and partial results
//! are combined in example order.

use alloc::vec;
use alloc::vec::Vec;

/// Geometry of a 2D convolution over an `[N, C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size, or `None` when it would be non-positive.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let span = |len: usize| {
            let padded = len + 2 * self.padding;
            if padded < self.kernel || self.stride == 0 {
                None
            } else {
                Some((padded - self.kernel) / self.stride + 1)
            }
        };
        Some((span(self.height)?, span(self.width)?))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) fn map_examples<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Unfolds one example `[C, H, W]` into `[C*k*k, OH*OW]` columns.
fn im2col(g: &ConvGeometry, x: &[f64], oh: usize, ow: usize, col: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*k*k, OH*OW]` columns back onto `[C, H, W]`, summing overlaps.
fn col2im(g: &ConvGeometry, col: &[f64], oh: usize, ow: usize, dx: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

const MR: usize = 4;

/// `out[m,n] += A[m,k] * b[k,n]` with `A[i,p] = a[i*ars + p*acs]`.
///
/// Each output sums its `k` products in ascending `p` whatever the tile
/// width, so every dispatch path returns identical bits.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], ars: usize, acs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_avx2(a, ars, acs, b, out, m, k, n) };
        return;
    }
    gemm_tiled::<4>(a, ars, acs, b, out, m, k, n);
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(a: &[f64], ars: usize, acs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_tiled::<8>(a, ars, acs, b, out, m, k, n);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_tiled<const NR: usize>(a: &[f64], ars: usize, acs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut panel = vec![0.0f64; k * MR];
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        if mr == MR {
            for (p, dst) in panel.chunks_exact_mut(MR).enumerate() {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = a[(i0 + i) * ars + p * acs];
                }
            }
        }
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for (i, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR]);
                }
                for (ap, brow) in panel.chunks_exact(MR).zip(b[j0..].chunks(n)) {
                    let ap: &[f64; MR] = ap.try_into().unwrap();
                    let brow: &[f64; NR] = brow[..NR].try_into().unwrap();
                    for (row, &av) in acc.iter_mut().zip(ap) {
                        for (r, &bv) in row.iter_mut().zip(brow) {
                            *r += av * bv;
                        }
                    }
                }
                for (i, row) in acc.iter().enumerate() {
                    out[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for i in i0..i0 + mr {
                    for j in j0..j0 + nr {
                        let mut s = out[i * n + j];
                        for p in 0..k {
                            s += a[i * ars + p * acs] * b[p * n + j];
                        }
                        out[i * n + j] = s;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn columns<'a>(g: &ConvGeometry, xn: &'a [f64], oh: usize, ow: usize) -> alloc::borrow::Cow<'a, [f64]> {
    if g.is_pointwise() {
        alloc::borrow::Cow::Borrowed(xn)
    } else {
        let mut col = vec![0.0; g.col_rows() * oh * ow];
        im2col(g, xn, oh, ow, &mut col);
        alloc::borrow::Cow::Owned(col)
    }
}

/// Cross-correlation of `x` `[N,C,H,W]` with `w` `[O,C,k,k]`; returns `[N,O,OH,OW]`.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let p = oh * ow;
    let in_len = g.in_channels * g.height * g.width;
    let rows = g.col_rows();
    let per_example = map_examples(g.batch, |n| {
        let col = columns(g, &x[n * in_len..(n + 1) * in_len], oh, ow);
        let mut out = vec![0.0; g.out_channels * p];
        gemm(w, rows, 1, &col, &mut out, g.out_channels, rows, p);
        out
    });
    per_example.concat()
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(g: &ConvGeometry, dout: &[f64], w: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let p = oh * ow;
    let in_len = g.in_channels * g.height * g.width;
    let rows = g.col_rows();
    let per_example = map_examples(g.batch, |n| {
        let dn = &dout[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        let mut dcol = vec![0.0; rows * p];
        gemm(w, 1, rows, dn, &mut dcol, rows, g.out_channels, p);
        if g.is_pointwise() {
            dcol
        } else {
            let mut dx = vec![0.0; in_len];
            col2im(g, &dcol, oh, ow, &mut dx);
            dx
        }
    });
    per_example.concat()
}

/// Gradient of the convolution with respect to its filters.
pub fn conv2d_backward_filter(g: &ConvGeometry, dout: &[f64], x: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let p = oh * ow;
    let in_len = g.in_channels * g.height * g.width;
    let rows = g.col_rows();
    let partials = map_examples(g.batch, |n| {
        let col = columns(g, &x[n * in_len..(n + 1) * in_len], oh, ow);
        let dn = &dout[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        let col_t = transpose(&col, rows, p);
        let mut dw = vec![0.0; g.out_channels * rows];
        gemm(dn, p, 1, &col_t, &mut dw, g.out_channels, p, rows);
        dw
    });
    let mut dw = vec![0.0; g.out_channels * rows];
    for part in &partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    dw
}

/// `[m,k] x [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, k, 1, b, &mut out, m, k, n);
    out
}

/// `[m,n] x [k,n]^T` → `[m,k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let bt = transpose(b, k, n);
    let mut out = vec![0.0; m * k];
    gemm(a, n, 1, &bt, &mut out, m, n, k);
    out
}

/// `[k,m]^T x [k,n]` → `[m,n]`.
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, 1, m, b, &mut out, m, k, n);
    out
}

/// Per-channel statistics saved by the batch-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Number of values each channel's statistics were computed over.
    pub count: Vec<f64>,
}

/// Per-channel mean and biased variance over `(N, H, W)` of `[N,C,HW]`.
///
/// With `mask` (`[N,C]`, entries 0 or 1) only examples whose mask entry is 1
/// contribute to that channel's statistics; a channel with no selected example
/// falls back to full-batch statistics.
pub fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize, mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut count = vec![0.0; c];
    for ch in 0..c {
        let selected = |b: usize| mask.is_none_or(|m| m[b * c + ch] != 0.0);
        let mut used = (0..n).filter(|&b| selected(b)).count();
        let all = used == 0;
        if all {
            used = n;
        }
        let take = |b: usize| all || selected(b);
        let mut s = 0.0;
        for b in (0..n).filter(|&b| take(b)) {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = (used * hw) as f64;
        let mu = s / m;
        let mut v = 0.0;
        for b in (0..n).filter(|&b| take(b)) {
            for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                let d = xv - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
        count[ch] = m;
    }
    (mean, var, count)
}

/// Training-mode batch norm forward: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    eps: f64,
    mask: Option<&[f64]>,
) -> (Vec<f64>, BatchStats) {
    let (mean, var, count) = channel_stats(x, n, c, hw, mask);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + hw {
                out[i] = g * ((x[i] - mu) * is) + bt;
            }
        }
    }
    (
        out,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for [`batch_norm_forward`].
pub fn batch_norm_backward(
    x: &[f64],
    gamma: &[f64],
    stats: &BatchStats,
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    mask: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
        // An all-zero mask column means full-batch statistics were used.
        let all = mask.is_none_or(|m| (0..n).all(|b| m[b * c + ch] == 0.0));
        let weight = |b: usize| {
            if all {
                1.0
            } else {
                mask.map_or(1.0, |m| m[b * c + ch])
            }
        };
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh;
                sum_g += dy[i];
                sum_gx += dy[i] * xh;
            }
        }
        let g = gamma[ch];
        let m = stats.count[ch];
        for b in 0..n {
            let w = weight(b);
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                dx[i] = g * is * (dy[i] - w * sum_g / m - w * xh * sum_gx / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling with window `size` and `stride`, no padding; returns output and argmax indices.
pub fn max_pool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

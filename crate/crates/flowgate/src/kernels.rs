//! Raw numeric kernels behind the tape operations.
//!
//! These are pure functions over flat row-major buffers. Convolution and
//! the all-pairs correlation are lowered to GEMM calls; everything here
//! is single-threaded and bit-deterministic for fixed shapes.

use matrixmultiply::dgemm;

/// `C = alpha * A @ B + beta * C` for row-major buffers.
///
/// Logical `A` is `m x k`; when `a_t` is set the buffer holds the
/// transpose (`k x m` row-major). Same convention for `B` (`k x n`).
/// `C` is always `m x n` row-major.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A buffer size");
    assert_eq!(b.len(), k * n, "gemm: B buffer size");
    assert_eq!(c.len(), m * n, "gemm: C buffer size");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial extent of a convolution axis: `(len + 2p - k) / s + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Shape bundle for one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn ho(&self) -> usize {
        conv_out_len(self.h, self.k, self.stride, self.pad)
    }
    pub fn wo(&self) -> usize {
        conv_out_len(self.w, self.k, self.stride, self.pad)
    }
}

/// Unfolds one sample into a `[cin*k*k, ho*wo]` patch matrix.
/// Out-of-range taps (from padding) read as zero.
fn im2col(x_n: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w, k, s, p) = (d.h, d.w, d.k, d.stride, d.pad);
    let (ho, wo) = (d.ho(), d.wo());
    let howo = ho * wo;
    for c in 0..d.cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * howo..(row + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        out[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x_n[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Folds a `[cin*k*k, ho*wo]` patch-gradient matrix back onto the input,
/// accumulating where patches overlap.
fn col2im(cols: &[f64], d: &ConvDims, dx_n: &mut [f64]) {
    let (h, w, k, s, p) = (d.h, d.w, d.k, d.stride, d.pad);
    let (ho, wo) = (d.ho(), d.wo());
    let howo = ho * wo;
    for c in 0..d.cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * howo..(row + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx_n[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward: `x [n,cin,h,w] * w [cout,cin,k,k] + b [cout]`.
pub fn conv2d_forward(x: &[f64], wgt: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ho, wo) = (d.ho(), d.wo());
    let howo = ho * wo;
    let ckk = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.batch * d.cout * howo];
    let mut cols = vec![0.0; ckk * howo];
    for n in 0..d.batch {
        im2col(&x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w], d, &mut cols);
        let out_n = &mut out[n * d.cout * howo..(n + 1) * d.cout * howo];
        gemm(d.cout, ckk, howo, 1.0, wgt, false, &cols, false, 0.0, out_n);
        for co in 0..d.cout {
            let b = bias[co];
            for v in &mut out_n[co * howo..(co + 1) * howo] {
                *v += b;
            }
        }
    }
    out
}

/// Convolution backward. Returns `(dx, dw, db)` for upstream `gout`.
pub fn conv2d_backward(
    x: &[f64],
    wgt: &[f64],
    gout: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (d.ho(), d.wo());
    let howo = ho * wo;
    let ckk = d.cin * d.k * d.k;
    let mut dx = vec![0.0; d.batch * d.cin * d.h * d.w];
    let mut dw = vec![0.0; d.cout * ckk];
    let mut db = vec![0.0; d.cout];
    let mut cols = vec![0.0; ckk * howo];
    let mut dcols = vec![0.0; ckk * howo];
    for n in 0..d.batch {
        let x_n = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let g_n = &gout[n * d.cout * howo..(n + 1) * d.cout * howo];
        // dX via W^T @ dY, folded back onto the input raster.
        gemm(ckk, d.cout, howo, 1.0, wgt, true, g_n, false, 0.0, &mut dcols);
        col2im(&dcols, d, &mut dx[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w]);
        // dW via dY @ cols^T, accumulated over the batch.
        im2col(x_n, d, &mut cols);
        gemm(d.cout, howo, ckk, 1.0, g_n, false, &cols, true, 1.0, &mut dw);
        for co in 0..d.cout {
            db[co] += g_n[co * howo..(co + 1) * howo].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// All-pairs feature correlation.
///
/// `f1, f2: [n, c, h, w]` produce `corr: [n, h, w, h, w]` where
/// `corr[a, b] = dot(f1[a], f2[b]) / sqrt(c)`; the first pixel index is
/// the source image, the second the target.
pub fn corr_volume_forward(f1: &[f64], f2: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; n * hw * hw];
    for s in 0..n {
        let a = &f1[s * c * hw..(s + 1) * c * hw];
        let b = &f2[s * c * hw..(s + 1) * c * hw];
        // A^T (hw x c) @ B (c x hw)
        gemm(hw, c, hw, scale, a, true, b, false, 0.0, &mut out[s * hw * hw..(s + 1) * hw * hw]);
    }
    out
}

/// Backward of the correlation volume. Returns `(df1, df2)`.
pub fn corr_volume_backward(
    f1: &[f64],
    f2: &[f64],
    gout: &[f64],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (c as f64).sqrt();
    let mut df1 = vec![0.0; n * c * hw];
    let mut df2 = vec![0.0; n * c * hw];
    for s in 0..n {
        let a = &f1[s * c * hw..(s + 1) * c * hw];
        let b = &f2[s * c * hw..(s + 1) * c * hw];
        let g = &gout[s * hw * hw..(s + 1) * hw * hw];
        // dF1 = F2 @ G^T, dF2 = F1 @ G (each c x hw).
        gemm(c, hw, hw, scale, b, false, g, true, 0.0, &mut df1[s * c * hw..(s + 1) * c * hw]);
        gemm(c, hw, hw, scale, a, false, g, false, 0.0, &mut df2[s * c * hw..(s + 1) * c * hw]);
    }
    (df1, df2)
}

/// Windowed bilinear lookup into the correlation volume.
///
/// For each source pixel `(i, j)` and integer offset `(dy, dx)` with
/// `|dy|, |dx| <= radius`, samples `corr[(i, j), (i + fy + dy, j + fx + dx)]`
/// bilinearly; target positions outside the grid contribute zero. Flow
/// channel 0 is horizontal (`x`), channel 1 vertical (`y`). Offsets are
/// laid out row-major: output channel `(dy + r) * (2r + 1) + (dx + r)`.
pub fn corr_lookup_forward(
    corr: &[f64],
    flow: &[f64],
    n: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> Vec<f64> {
    let side = 2 * radius + 1;
    let hw = h * w;
    let mut out = vec![0.0; n * side * side * hw];
    for s in 0..n {
        let corr_s = &corr[s * hw * hw..(s + 1) * hw * hw];
        for i in 0..h {
            for j in 0..w {
                let src = i * w + j;
                let fx = flow[(s * 2) * hw + src];
                let fy = flow[(s * 2 + 1) * hw + src];
                let slice = &corr_s[src * hw..(src + 1) * hw];
                for dy in 0..side {
                    let ty = i as f64 + fy + dy as f64 - radius as f64;
                    for dx in 0..side {
                        let tx = j as f64 + fx + dx as f64 - radius as f64;
                        let d = dy * side + dx;
                        out[((s * side * side) + d) * hw + src] =
                            bilinear_zero(slice, h, w, ty, tx);
                    }
                }
            }
        }
    }
    out
}

/// Bilinear read with zero outside the grid.
pub(crate) fn bilinear_zero(grid: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ay = y - y0;
    let ax = x - x0;
    let mut acc = 0.0;
    for (cy, wy) in [(y0, 1.0 - ay), (y0 + 1.0, ay)] {
        if cy < 0.0 || cy > (h - 1) as f64 {
            continue;
        }
        for (cx, wx) in [(x0, 1.0 - ax), (x0 + 1.0, ax)] {
            if cx < 0.0 || cx > (w - 1) as f64 {
                continue;
            }
            acc += wy * wx * grid[cy as usize * w + cx as usize];
        }
    }
    acc
}

/// Backward of the windowed lookup. Returns `(dcorr, dflow)`.
///
/// The sampled value is piecewise bilinear in the flow; its derivative is
/// the difference of neighboring grid values weighted by the interpolation
/// coefficients of the orthogonal axis.
pub fn corr_lookup_backward(
    corr: &[f64],
    flow: &[f64],
    gout: &[f64],
    n: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> (Vec<f64>, Vec<f64>) {
    let side = 2 * radius + 1;
    let hw = h * w;
    let mut dcorr = vec![0.0; n * hw * hw];
    let mut dflow = vec![0.0; n * 2 * hw];
    let read = |grid: &[f64], cy: f64, cx: f64| -> f64 {
        if cy < 0.0 || cy > (h - 1) as f64 || cx < 0.0 || cx > (w - 1) as f64 {
            0.0
        } else {
            grid[cy as usize * w + cx as usize]
        }
    };
    for s in 0..n {
        let corr_s = &corr[s * hw * hw..(s + 1) * hw * hw];
        for i in 0..h {
            for j in 0..w {
                let src = i * w + j;
                let fx = flow[(s * 2) * hw + src];
                let fy = flow[(s * 2 + 1) * hw + src];
                let slice = &corr_s[src * hw..(src + 1) * hw];
                let dslice = &mut dcorr[s * hw * hw + src * hw..s * hw * hw + (src + 1) * hw];
                let mut gx = 0.0;
                let mut gy = 0.0;
                for dy in 0..side {
                    let ty = i as f64 + fy + dy as f64 - radius as f64;
                    for dx in 0..side {
                        let tx = j as f64 + fx + dx as f64 - radius as f64;
                        let d = dy * side + dx;
                        let g = gout[((s * side * side) + d) * hw + src];
                        if g == 0.0 {
                            continue;
                        }
                        let y0 = ty.floor();
                        let x0 = tx.floor();
                        let ay = ty - y0;
                        let ax = tx - x0;
                        // Scatter onto the four corners.
                        for (cy, wy) in [(y0, 1.0 - ay), (y0 + 1.0, ay)] {
                            if cy < 0.0 || cy > (h - 1) as f64 {
                                continue;
                            }
                            for (cx, wx) in [(x0, 1.0 - ax), (x0 + 1.0, ax)] {
                                if cx < 0.0 || cx > (w - 1) as f64 {
                                    continue;
                                }
                                dslice[cy as usize * w + cx as usize] += g * wy * wx;
                            }
                        }
                        // d(sample)/d(ty): vertical difference at both columns.
                        let c00 = read(slice, y0, x0);
                        let c01 = read(slice, y0, x0 + 1.0);
                        let c10 = read(slice, y0 + 1.0, x0);
                        let c11 = read(slice, y0 + 1.0, x0 + 1.0);
                        gy += g * ((1.0 - ax) * (c10 - c00) + ax * (c11 - c01));
                        gx += g * ((1.0 - ay) * (c01 - c00) + ay * (c11 - c10));
                    }
                }
                dflow[(s * 2) * hw + src] += gx;
                dflow[(s * 2 + 1) * hw + src] += gy;
            }
        }
    }
    (dcorr, dflow)
}

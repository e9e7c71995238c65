//! Forward and backward kernels on flat row-major buffers.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let base = iy as usize * g.w;
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let in_len = g.c * g.h * g.w;
    let out_len = g.co * hw;
    let mut cols = vec![T::zero(); ckk * hw];
    for b in 0..n {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let y = &mut out[b * out_len..(b + 1) * out_len];
        T::gemm(
            g.co, ckk, hw, T::one(), weight, ckk as isize, 1, &cols, hw as isize, 1, T::zero(), y,
            hw as isize, 1,
        );
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
}

/// Accumulates weight/bias gradients; writes `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let in_len = g.c * g.h * g.w;
    let out_len = g.co * hw;
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let dy_b = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            T::gemm(
                g.co, hw, ckk, T::one(), dy_b, hw as isize, 1, &cols, 1, hw as isize, T::one(), dw,
                ckk as isize, 1,
            );
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d = *d + dy_b[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                ckk, g.co, hw, T::one(), weight, 1, ckk as isize, dy_b, hw as isize, 1, T::zero(),
                &mut dcols, hw as isize, 1,
            );
            col2im_add(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

pub fn linear_forward<T: Real>(x: &[T], n: usize, fin: usize, fout: usize, weight: &[T], bias: Option<&[T]>, y: &mut [T]) {
    T::gemm(n, fin, fout, T::one(), x, fin as isize, 1, weight, 1, fin as isize, T::zero(), y, fout as isize, 1);
    if let Some(bias) = bias {
        for row in y.chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    fin: usize,
    fout: usize,
    weight: &[T],
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dw {
        T::gemm(fout, n, fin, T::one(), dy, 1, fout as isize, x, fin as isize, 1, T::one(), dw, fin as isize, 1);
    }
    if let Some(db) = db {
        for row in dy.chunks(fout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
    }
    if let Some(dx) = dx {
        T::gemm(n, fout, fin, T::one(), dy, fout as isize, 1, weight, fin as isize, 1, T::zero(), dx, fin as isize, 1);
    }
}

/// Saved state of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
    pub gamma: Vec<T>,
    pub train: bool,
}

/// Batch-norm over `[n, c, hw]`. In training mode returns the batch mean and
/// unbiased variance for the running-statistics update.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
    y: &mut [T],
) -> (BnSaved<T>, Option<(Vec<T>, Vec<T>)>) {
    let m = n * hw;
    let mut xhat = vec![T::zero(); x.len()];
    let mut invstd = vec![T::zero(); c];
    let mut batch_stats = None;
    let (means, vars) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let mut means = vec![T::zero(); c];
            let mut vars = vec![T::zero(); c];
            let mut unbiased = vec![T::zero(); c];
            let mf = T::lit(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s = s + x[off..off + hw].iter().copied().sum::<T>();
                }
                let mean = s / mf;
                let mut ss = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    ss = ss + x[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                means[ch] = mean;
                vars[ch] = ss / mf;
                unbiased[ch] = if m > 1 { ss / T::lit((m - 1) as f64) } else { ss };
            }
            batch_stats = Some((means.clone(), unbiased));
            (means, vars)
        }
    };
    for ch in 0..c {
        let is = T::one() / (vars[ch] + eps).sqrt();
        invstd[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - means[ch]) * is;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        BnSaved {
            xhat,
            invstd,
            gamma: gamma.to_vec(),
            train: running.is_none(),
        },
        batch_stats,
    )
}

pub fn batchnorm_backward<T: Real>(
    saved: &BnSaved<T>,
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: Option<&mut [T]>,
) {
    let m = T::lit((n * hw) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_dy[ch] = sum_dy[ch] + dy[i];
                sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = dgamma[ch] + sum_dy_xhat[ch];
        dbeta[ch] = dbeta[ch] + sum_dy[ch];
    }
    let Some(dx) = dx else { return };
    for ch in 0..c {
        let g = saved.gamma[ch];
        let is = saved.invstd[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if saved.train {
                    // dxhat = dy·γ; Σdxhat = γ·Σdy; Σdxhat·xhat = γ·Σdy·xhat
                    g * is / m * (m * dy[i] - sum_dy[ch] - saved.xhat[i] * sum_dy_xhat[ch])
                } else {
                    g * is * dy[i]
                };
            }
        }
    }
}

pub fn avgpool_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize, k: usize, y: &mut [T]) {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        s = s + src[(oy * k + ky) * w + ox * k + kx];
                    }
                }
                dst[oy * wo + ox] = s * scale;
            }
        }
    }
}

pub fn avgpool_backward<T: Real>(dy: &[T], nc: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    for p in 0..nc {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * scale;
                for ky in 0..k {
                    for kx in 0..k {
                        dst[(oy * k + ky) * w + ox * k + kx] = g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.co * g.ho * g.wo];
        for o in 0..g.co {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for ci in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            co: 3,
            k: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; 18];
        conv2d_forward(&x, 1, &g, &w, None, &mut out);
        let expect = naive_conv(&x, &g, &w);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avgpool_roundtrip_shapes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut y = [0.0];
        avgpool_forward(&x, 1, 2, 2, 2, &mut y);
        assert_eq!(y, [2.5]);
        let mut dx = [0.0; 4];
        avgpool_backward(&[4.0], 1, 2, 2, 2, &mut dx);
        assert_eq!(dx, [1.0; 4]);
    }
}

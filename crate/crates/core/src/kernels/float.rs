//! F32 reference kernels. TOP inference calls these directly, so F32-mode
//! TPU programs reproduce it exactly.

use super::{AddDesc, ConvDesc, MatMulDesc, PoolDesc, SoftmaxDesc};

/// Tap coordinate in buffer space, or `None` when it falls in padding.
#[inline]
pub(super) fn tap(o: u32, stride: u32, k: u32, dil: u32, pad: u32, extent: u32) -> Option<usize> {
    let pos = (o * stride + k * dil) as i64 - pad as i64;
    if pos < 0 || pos >= extent as i64 {
        None
    } else {
        Some(pos as usize)
    }
}

pub fn relu_f32(x: &mut [f32], relu_limit: f32) {
    for v in x {
        let mut y = if *v > 0.0 { *v } else { 0.0 };
        if relu_limit > 0.0 && y > relu_limit {
            y = relu_limit;
        }
        *v = y;
    }
}

/// Grouped cross-correlation, NCHW input, `[OC, IC/group, KH, KW]` filter.
/// Accumulates kernel rows, then kernel columns, then input channels; the
/// bias is added last.
pub fn conv2d_f32(d: &ConvDesc, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (ih, iw, oh, ow) = (d.ih as usize, d.iw as usize, d.oh as usize, d.ow as usize);
    let (kh, kw) = (d.kh as usize, d.kw as usize);
    let icg = (d.ic / d.group) as usize;
    let ocg = (d.oc / d.group) as usize;
    let mut out = vec![0f32; d.n as usize * d.oc as usize * oh * ow];
    let mut idx = 0;
    for n in 0..d.n as usize {
        for o in 0..d.oc as usize {
            let g = o / ocg;
            let wbase = o * icg * kh * kw;
            let xbase = (n * d.ic as usize + g * icg) * ih * iw;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = 0f32;
                    for ky in 0..d.kh {
                        let Some(iy) = tap(oy, d.sh, ky, d.dh, d.pt, d.ih) else {
                            continue;
                        };
                        for kx in 0..d.kw {
                            let Some(ix) = tap(ox, d.sw, kx, d.dw, d.pl, d.iw) else {
                                continue;
                            };
                            let woff = wbase + ky as usize * kw + kx as usize;
                            let xoff = xbase + iy * iw + ix;
                            for c in 0..icg {
                                acc += x[xoff + c * ih * iw] * w[woff + c * kh * kw];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[o];
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    if d.do_relu {
        relu_f32(&mut out, d.relu_limit);
    }
    out
}

pub fn maxpool_f32(d: &PoolDesc, x: &[f32]) -> Vec<f32> {
    let (ih, iw) = (d.ih as usize, d.iw as usize);
    let mut out = Vec::with_capacity((d.n * d.c * d.oh * d.ow) as usize);
    for nc in 0..(d.n * d.c) as usize {
        let base = nc * ih * iw;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..d.kh {
                    let Some(iy) = tap(oy, d.sh, ky, 1, d.pt, d.ih) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = tap(ox, d.sw, kx, 1, d.pl, d.iw) else {
                            continue;
                        };
                        let v = x[base + iy * iw + ix];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn avgpool_f32(d: &PoolDesc, x: &[f32]) -> Vec<f32> {
    let (ih, iw) = (d.ih as usize, d.iw as usize);
    let mut out = Vec::with_capacity((d.n * d.c * d.oh * d.ow) as usize);
    for nc in 0..(d.n * d.c) as usize {
        let base = nc * ih * iw;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut sum = 0f32;
                let mut count = 0u32;
                for ky in 0..d.kh {
                    let Some(iy) = tap(oy, d.sh, ky, 1, d.pt, d.ih) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = tap(ox, d.sw, kx, 1, d.pl, d.iw) else {
                            continue;
                        };
                        sum += x[base + iy * iw + ix];
                        count += 1;
                    }
                }
                let div = if d.count_include_pad { d.kh * d.kw } else { count.max(1) };
                out.push(sum / div as f32);
            }
        }
    }
    out
}

#[inline]
pub(super) fn add_index(d: &AddDesc, bcast: bool, i: usize) -> usize {
    if bcast {
        (i / (d.h * d.w) as usize) % d.c as usize
    } else {
        i
    }
}

pub fn add_f32(d: &AddDesc, a: &[f32], b: &[f32]) -> Vec<f32> {
    let total = (d.n * d.c * d.h * d.w) as usize;
    (0..total)
        .map(|i| a[add_index(d, d.a_bcast, i)] + b[add_index(d, d.b_bcast, i)])
        .collect()
}

/// `[M,K] x [K,N]` (or `[N,K]` when transposed), bias per output column.
pub fn matmul_f32(d: &MatMulDesc, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (m, k, n) = (d.m as usize, d.k as usize, d.n as usize);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0f32;
            for p in 0..k {
                let wv = if d.right_transpose { w[j * k + p] } else { w[p * n + j] };
                acc += x[i * k + p] * wv;
            }
            if let Some(b) = bias {
                acc += b[j];
            }
            out[i * n + j] = acc;
        }
    }
    if d.do_relu {
        relu_f32(&mut out, d.relu_limit);
    }
    out
}

pub fn softmax_f32(d: &SoftmaxDesc, x: &[f32]) -> Vec<f32> {
    let (axis, inner) = (d.axis as usize, d.inner as usize);
    let mut out = vec![0f32; x.len()];
    for o in 0..d.outer as usize {
        for i in 0..inner {
            let at = |a: usize| o * axis * inner + a * inner + i;
            let max = (0..axis).map(|a| x[at(a)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f32;
            for a in 0..axis {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..axis {
                out[at(a)] /= sum;
            }
        }
    }
    out
}

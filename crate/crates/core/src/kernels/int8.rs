//! Integer pipelines: widened accumulators, per-channel requant, saturation.

use crate::error::{Error, Result};
use crate::numeric::{requant, saturate};

use super::float::{add_index, tap};
use super::{AddDesc, ConvDesc, MatMulDesc, PoolDesc, QuantArgs};

#[inline]
fn param(v: &[i32], i: usize) -> i32 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn checked_acc(acc: i64) -> Result<i64> {
    if acc < i32::MIN as i64 || acc > i32::MAX as i64 {
        Err(Error::AccumOverflow)
    } else {
        Ok(acc)
    }
}

/// Requantize one accumulator to the output code, honouring a fused relu.
#[inline]
fn finish(q: &QuantArgs, acc: i64, ch: usize, do_relu: bool) -> i8 {
    let mut y = requant(acc, param(&q.multiplier, ch), param(&q.rshift, ch)) + q.zp_out as i64;
    if do_relu {
        y = y.clamp(q.zp_out as i64, (q.act_max as i64).max(q.zp_out as i64));
    }
    saturate(y, q.qmin, q.qmax) as i8
}

/// `acc_c = sum (x - zp_in) * w + bias_c`, then
/// `y = saturate(rshift_round(acc_c * M_c, r_c) + zp_out)`.
/// Taps in padding contribute nothing, i.e. padding holds `zp_in`.
pub fn conv2d_int8(d: &ConvDesc, x: &[i8], w: &[i8], bias: Option<&[i32]>) -> Result<Vec<i8>> {
    let (ih, iw) = (d.ih as usize, d.iw as usize);
    let (kh, kw) = (d.kh as usize, d.kw as usize);
    let icg = (d.ic / d.group) as usize;
    let ocg = (d.oc / d.group) as usize;
    let zp_in = d.q.zp_in as i64;
    let mut out = Vec::with_capacity((d.n * d.oc * d.oh * d.ow) as usize);
    for n in 0..d.n as usize {
        for o in 0..d.oc as usize {
            let g = o / ocg;
            let wbase = o * icg * kh * kw;
            let xbase = (n * d.ic as usize + g * icg) * ih * iw;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = 0i64;
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
                                acc += (x[xoff + c * ih * iw] as i64 - zp_in) * w[woff + c * kh * kw] as i64;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[o] as i64;
                    }
                    out.push(finish(&d.q, checked_acc(acc)?, o, d.do_relu));
                }
            }
        }
    }
    Ok(out)
}

/// Max over raw codes; input and output share one quantization.
pub fn maxpool_int8(d: &PoolDesc, x: &[i8]) -> Vec<i8> {
    let (ih, iw) = (d.ih as usize, d.iw as usize);
    let mut out = Vec::with_capacity((d.n * d.c * d.oh * d.ow) as usize);
    for nc in 0..(d.n * d.c) as usize {
        let base = nc * ih * iw;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut m = i8::MIN;
                for ky in 0..d.kh {
                    let Some(iy) = tap(oy, d.sh, ky, 1, d.pt, d.ih) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = tap(ox, d.sw, kx, 1, d.pl, d.iw) else {
                            continue;
                        };
                        m = m.max(x[base + iy * iw + ix]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Sum of `(x - zp_in)` over the window, requantized with the parameters
/// for its divisor.
pub fn avgpool_int8(d: &PoolDesc, x: &[i8]) -> Result<Vec<i8>> {
    let (ih, iw) = (d.ih as usize, d.iw as usize);
    let zp_in = d.q.zp_in as i64;
    let mut out = Vec::with_capacity((d.n * d.c * d.oh * d.ow) as usize);
    for nc in 0..(d.n * d.c) as usize {
        let base = nc * ih * iw;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut sum = 0i64;
                let mut count = 0u32;
                for ky in 0..d.kh {
                    let Some(iy) = tap(oy, d.sh, ky, 1, d.pt, d.ih) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = tap(ox, d.sw, kx, 1, d.pl, d.iw) else {
                            continue;
                        };
                        sum += x[base + iy * iw + ix] as i64 - zp_in;
                        count += 1;
                    }
                }
                let div = if d.count_include_pad { d.kh * d.kw } else { count.max(1) };
                out.push(finish(&d.q, checked_acc(sum)?, div as usize - 1, false));
            }
        }
    }
    Ok(out)
}

/// Each operand is rescaled to the output scale on its own, then summed.
pub fn add_int8(d: &AddDesc, a: &[i8], b: &[i8]) -> Vec<i8> {
    let total = (d.n * d.c * d.h * d.w) as usize;
    let q = &d.q;
    (0..total)
        .map(|i| {
            let xa = a[add_index(d, d.a_bcast, i)] as i64 - d.zp_a as i64;
            let xb = b[add_index(d, d.b_bcast, i)] as i64 - d.zp_b as i64;
            let y = requant(xa, q.multiplier[0], q.rshift[0]) + requant(xb, q.multiplier[1], q.rshift[1]);
            saturate(y + q.zp_out as i64, q.qmin, q.qmax) as i8
        })
        .collect()
}

pub fn matmul_int8(d: &MatMulDesc, x: &[i8], w: &[i8], bias: Option<&[i32]>) -> Result<Vec<i8>> {
    let (m, k, n) = (d.m as usize, d.k as usize, d.n as usize);
    let zp_in = d.q.zp_in as i64;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i64;
            for p in 0..k {
                let wv = if d.right_transpose { w[j * k + p] } else { w[p * n + j] };
                acc += (x[i * k + p] as i64 - zp_in) * wv as i64;
            }
            if let Some(b) = bias {
                acc += b[j] as i64;
            }
            out.push(finish(&d.q, checked_acc(acc)?, j, d.do_relu));
        }
    }
    Ok(out)
}

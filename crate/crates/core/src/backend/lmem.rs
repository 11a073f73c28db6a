use std::ops::Range;

use crate::error::{Error, Result};
use crate::ir::{ChipConfig, ModuleIR, OpKind, Operation};
use crate::ops;
use crate::tensor_store::DType;

pub fn align_up(v: u64, a: u64) -> u64 {
    if a <= 1 {
        v
    } else {
        v.div_ceil(a) * a
    }
}

/// Per-lane bytes of an NCHW tensor whose channels are spread round-robin
/// over the lanes: `n * ceil(c / npu_num) * row`, where `row = h*w*esize`,
/// rounded up to `eu_bytes` when `eu_align` is set.
pub fn lmem_size(shape: &[usize], dtype: DType, chip: &ChipConfig, eu_align: bool) -> u64 {
    let mut d = [1u64; 4];
    for (i, s) in shape.iter().take(4).enumerate() {
        d[i] = *s as u64;
    }
    let [n, c, h, w] = d;
    n * c.div_ceil(chip.npu_num) * row_bytes(h, w, dtype, chip, eu_align)
}

/// Bytes one channel occupies in a lane.
pub fn row_bytes(h: u64, w: u64, dtype: DType, chip: &ChipConfig, eu_align: bool) -> u64 {
    let raw = h * w * dtype.byte_size() as u64;
    if eu_align {
        align_up(raw, chip.eu_bytes)
    } else {
        raw
    }
}

/// Input rows an op needs to produce output rows `out`. Conv and pooling
/// account for stride, padding and dilation (the halo); elementwise ops map
/// rows one to one.
pub fn backward_slice(m: &ModuleIR, op: &Operation, out: Range<usize>) -> Result<Range<usize>> {
    if out.is_empty() {
        return Err(Error::EmptySlice);
    }
    match op.kind() {
        OpKind::Conv | OpKind::MaxPool | OpKind::AvgPool => {
            let fshape = (op.kind() == OpKind::Conv).then(|| m.ty(op.operands[1]).shape.as_slice());
            let win = ops::window(op, fshape)?;
            let h = m.ty(op.operands[0]).shape[2] as i64;
            let (s, p, k, d) = (win.sh as i64, win.pt as i64, win.kh as i64, win.dh as i64);
            let start = (out.start as i64 * s - p).max(0);
            let end = ((out.end as i64 - 1) * s - p + (k - 1) * d + 1).min(h);
            if end <= start {
                return Err(Error::EmptySlice);
            }
            Ok(start as usize..end as usize)
        }
        OpKind::Relu | OpKind::Add | OpKind::Cast | OpKind::Reshape => Ok(out),
        k => Err(Error::codegen(format!("{k:?} cannot be sliced"))),
    }
}

/// Top padding a sliced conv/pool still sees when its first output row is
/// `out_start`.
pub fn pad_top_eff(pt: usize, stride: usize, out_start: usize) -> usize {
    pt.saturating_sub(out_start * stride)
}

/// `len` split into `secs` consecutive ranges; the first `len % secs` get one
/// extra element.
pub fn split_even(len: usize, secs: usize) -> Vec<Range<usize>> {
    let (base, rem) = (len / secs, len % secs);
    let mut out = Vec::with_capacity(secs);
    let mut at = 0;
    for k in 0..secs {
        let l = base + (k < rem) as usize;
        out.push(at..at + l);
        at += l;
    }
    out
}

pub fn hull(a: &Range<usize>, b: &Range<usize>) -> Range<usize> {
    a.start.min(b.start)..a.end.max(b.end)
}

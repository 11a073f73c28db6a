//! Per-op attribute decoding, shape inference and kernel descriptors.
//!
//! Both dialects share the attribute vocabulary, so TOP and TPU runners and
//! the code generator all build kernel descriptors here.

use crate::error::{Error, Result};
use crate::ir::{AttrMapExt, ModuleIR, OpKind, Operation, QuantAnnotation, TensorType, UniformQuant};
use crate::kernels::{
    AddDesc, CastDesc, ConvDesc, Kernel, MatMulDesc, PoolDesc, PoolKind, QuantArgs, ReluDesc, SoftmaxDesc,
};
use crate::numeric::round_half_away;
use crate::tensor_store::DType;

/// Spatial parameters of a Conv or Pool op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub dh: usize,
    pub dw: usize,
    pub pt: usize,
    pub pl: usize,
    pub pb: usize,
    pub pr: usize,
}

impl Window {
    pub fn out_extent(in_h: usize, pad: usize, k: usize, stride: usize, dil: usize) -> Option<usize> {
        let span = dil * (k - 1) + 1;
        let padded = in_h + pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Window::out_extent(h, self.pt + self.pb, self.kh, self.sh, self.dh)?,
            Window::out_extent(w, self.pl + self.pr, self.kw, self.sw, self.dw)?,
        ))
    }
}

fn pair(op: &Operation, key: &str, default: [usize; 2]) -> Result<[usize; 2]> {
    match op.attrs.ints(key) {
        None => Ok(default),
        Some([a, b]) if *a >= 0 && *b >= 0 => Ok([*a as usize, *b as usize]),
        Some(v) => Err(Error::verify(key, format!("expected two non-negative ints, got {v:?}"))),
    }
}

/// Window of a Conv (kernel from the filter if `kernel_shape` is absent) or
/// Pool op.
pub fn window(op: &Operation, filter_shape: Option<&[usize]>) -> Result<Window> {
    let default_k = match filter_shape {
        Some(s) if s.len() == 4 => [s[2], s[3]],
        _ => [1, 1],
    };
    let [kh, kw] = pair(op, "kernel_shape", default_k)?;
    let [sh, sw] = pair(op, "strides", [1, 1])?;
    let [dh, dw] = pair(op, "dilations", [1, 1])?;
    let pads = match op.attrs.ints("pads") {
        None => [0; 4],
        Some(p) if p.len() == 4 && p.iter().all(|v| *v >= 0) => {
            [p[0] as usize, p[1] as usize, p[2] as usize, p[3] as usize]
        }
        Some(p) => return Err(Error::verify("pads", format!("expected [t,l,b,r], got {p:?}"))),
    };
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || dh == 0 || dw == 0 {
        return Err(Error::verify("window", "kernel, stride and dilation must be positive"));
    }
    Ok(Window {
        kh,
        kw,
        sh,
        sw,
        dh,
        dw,
        pt: pads[0],
        pl: pads[1],
        pb: pads[2],
        pr: pads[3],
    })
}

pub fn group(op: &Operation) -> usize {
    op.attrs.int_or("group", 1).max(1) as usize
}

pub fn relu_limit(op: &Operation) -> f32 {
    op.attrs.float_or("relu_limit", -1.0) as f32
}

/// Result shape of a compute op from its operand shapes. `None` entries are
/// absent optional operands.
pub fn infer_shape(op: &Operation, operands: &[Option<&[usize]>]) -> std::result::Result<Vec<usize>, String> {
    let get = |i: usize| -> std::result::Result<&[usize], String> {
        operands
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| format!("operand {i} missing"))
    };
    match op.kind() {
        OpKind::Relu | OpKind::Softmax | OpKind::Cast => Ok(get(0)?.to_vec()),
        OpKind::BatchNorm => {
            let x = get(0)?;
            if x.len() < 2 {
                return Err("BatchNorm needs rank >= 2".into());
            }
            for i in 1..5 {
                if get(i)?.iter().product::<usize>() != x[1] {
                    return Err(format!("BatchNorm parameter {i} must have {} elements", x[1]));
                }
            }
            Ok(x.to_vec())
        }
        OpKind::Conv => {
            let (x, w) = (get(0)?, get(1)?);
            if x.len() != 4 || w.len() != 4 {
                return Err("Conv expects rank-4 input and filter".into());
            }
            let g = group(op);
            if x[1] % g != 0 || w[0] % g != 0 || w[1] * g != x[1] {
                return Err(format!("filter {w:?} inconsistent with input {x:?} and group {g}"));
            }
            if let Some(Some(b)) = operands.get(2) {
                if b.iter().product::<usize>() != w[0] {
                    return Err("bias length must equal output channels".into());
                }
            }
            let win = window(op, Some(w)).map_err(|e| e.to_string())?;
            if win.kh != w[2] || win.kw != w[3] {
                return Err("kernel_shape disagrees with filter".into());
            }
            let (oh, ow) = win.out_hw(x[2], x[3]).ok_or("window larger than padded input")?;
            Ok(vec![x[0], w[0], oh, ow])
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let x = get(0)?;
            if x.len() != 4 {
                return Err("pooling expects rank-4 input".into());
            }
            let win = window(op, None).map_err(|e| e.to_string())?;
            if win.dh != 1 || win.dw != 1 {
                return Err("dilated pooling is not supported".into());
            }
            let (oh, ow) = win.out_hw(x[2], x[3]).ok_or("window larger than padded input")?;
            Ok(vec![x[0], x[1], oh, ow])
        }
        OpKind::Add => {
            let (a, b) = (get(0)?, get(1)?);
            if a == b {
                return Ok(a.to_vec());
            }
            if is_channel_bcast(b, a) {
                return Ok(a.to_vec());
            }
            if is_channel_bcast(a, b) {
                return Ok(b.to_vec());
            }
            Err(format!("cannot broadcast {a:?} with {b:?}"))
        }
        OpKind::MatMul => {
            let (x, w) = (get(0)?, get(1)?);
            if x.is_empty() || w.len() != 2 {
                return Err("MatMul expects a rank-2 right operand".into());
            }
            let k = *x.last().unwrap();
            let (wk, n) = if op.attrs.bool_or("right_transpose", false) {
                (w[1], w[0])
            } else {
                (w[0], w[1])
            };
            if wk != k {
                return Err(format!("contraction mismatch {x:?} x {w:?}"));
            }
            if let Some(Some(b)) = operands.get(2) {
                if b.iter().product::<usize>() != n {
                    return Err("bias length must equal N".into());
                }
            }
            let mut out = x.to_vec();
            *out.last_mut().unwrap() = n;
            Ok(out)
        }
        OpKind::Reshape => {
            let x = get(0)?;
            let total: usize = x.iter().product();
            let spec = op.attrs.ints("shape").ok_or("Reshape needs a shape attribute")?;
            reshape_target(spec, total).ok_or_else(|| format!("cannot reshape {x:?} to {spec:?}"))
        }
        k => Err(format!("no shape rule for {k:?}")),
    }
}

/// `small` is a per-channel `[1,C,1,1]` operand for `big`.
pub fn is_channel_bcast(small: &[usize], big: &[usize]) -> bool {
    big.len() >= 2
        && small.len() == big.len()
        && small[1] == big[1]
        && small.iter().enumerate().all(|(i, d)| i == 1 || *d == 1)
        && small != big
}

/// Resolve a reshape spec with at most one `-1`.
pub fn reshape_target(spec: &[i64], total: usize) -> Option<Vec<usize>> {
    let negs = spec.iter().filter(|d| **d == -1).count();
    if negs > 1 || spec.iter().any(|d| *d == 0 || *d < -1) {
        return None;
    }
    let known: usize = spec.iter().filter(|d| **d > 0).map(|d| *d as usize).product();
    if known == 0 {
        return None;
    }
    let out: Vec<usize> = spec
        .iter()
        .map(|d| if *d == -1 { total / known } else { *d as usize })
        .collect();
    (out.iter().product::<usize>() == total && !out.is_empty()).then_some(out)
}

fn u(v: usize) -> u32 {
    v as u32
}

fn uniform(ty: &TensorType, what: &str) -> Result<UniformQuant> {
    ty.quant
        .uniform()
        .cloned()
        .ok_or_else(|| Error::verify(what, "INT8 op needs a uniform-quantized type"))
}

fn ints32(op: &Operation, key: &str) -> Result<Vec<i32>> {
    op.attrs
        .ints(key)
        .map(|v| v.iter().map(|x| *x as i32).collect())
        .ok_or_else(|| Error::verify(op.opcode.to_string(), format!("missing `{key}`")))
}

/// Upper clamp of a fused relu, in output codes.
fn act_max(limit: f32, out: &UniformQuant) -> i32 {
    if limit > 0.0 {
        let q = round_half_away(limit as f64 / out.scale) as i64 + out.zero_point as i64;
        q.clamp(out.qmin as i64, out.qmax as i64) as i32
    } else {
        out.qmax
    }
}

/// Quant args for an INT8 op with input quant `inq` and output quant `outq`.
fn quant_args(op: &Operation, inq: &UniformQuant, outq: &UniformQuant, limit: f32) -> Result<QuantArgs> {
    Ok(QuantArgs {
        zp_in: inq.zero_point,
        zp_out: outq.zero_point,
        qmin: outq.qmin,
        qmax: outq.qmax,
        act_max: act_max(limit, outq),
        multiplier: ints32(op, "multiplier")?,
        rshift: ints32(op, "rshift")?,
    })
}

/// Full-tensor conv descriptor.
pub fn conv_desc(m: &ModuleIR, op: &Operation) -> Result<ConvDesc> {
    let x = m.ty(op.operands[0]);
    let w = m.ty(op.operands[1]);
    let y = m.ty(op.result());
    let nchw = x
        .nchw()
        .ok_or_else(|| Error::verify(m.name_of(op.result()), "conv input must be rank 4"))?;
    let win = window(op, Some(&w.shape))?;
    let limit = relu_limit(op);
    let do_relu = op.attrs.bool_or("do_relu", false);
    let q = if y.dtype == DType::I8 {
        quant_args(op, &uniform(x, "conv input")?, &uniform(y, "conv output")?, limit)?
    } else {
        QuantArgs::default()
    };
    Ok(ConvDesc {
        dtype: y.dtype,
        n: u(nchw[0]),
        ic: u(nchw[1]),
        ih: u(nchw[2]),
        iw: u(nchw[3]),
        oc: u(y.shape[1]),
        oh: u(y.shape[2]),
        ow: u(y.shape[3]),
        kh: u(win.kh),
        kw: u(win.kw),
        sh: u(win.sh),
        sw: u(win.sw),
        dh: u(win.dh),
        dw: u(win.dw),
        pt: u(win.pt),
        pl: u(win.pl),
        group: u(group(op)),
        has_bias: !op.operands[2].is_none(),
        do_relu,
        relu_limit: limit,
        q,
    })
}

pub fn pool_desc(m: &ModuleIR, op: &Operation) -> Result<PoolDesc> {
    let x = m.ty(op.operands[0]);
    let y = m.ty(op.result());
    let win = window(op, None)?;
    let kind = if op.kind() == OpKind::MaxPool {
        PoolKind::Max
    } else {
        PoolKind::Avg
    };
    let q = if y.dtype == DType::I8 && kind == PoolKind::Avg {
        quant_args(op, &uniform(x, "pool input")?, &uniform(y, "pool output")?, -1.0)?
    } else {
        QuantArgs::default()
    };
    Ok(PoolDesc {
        kind,
        dtype: y.dtype,
        n: u(x.shape[0]),
        c: u(x.shape[1]),
        ih: u(x.shape[2]),
        iw: u(x.shape[3]),
        oh: u(y.shape[2]),
        ow: u(y.shape[3]),
        kh: u(win.kh),
        kw: u(win.kw),
        sh: u(win.sh),
        sw: u(win.sw),
        pt: u(win.pt),
        pl: u(win.pl),
        count_include_pad: op.attrs.bool_or("count_include_pad", false),
        q,
    })
}

pub fn add_desc(m: &ModuleIR, op: &Operation) -> Result<AddDesc> {
    let a = m.ty(op.operands[0]);
    let b = m.ty(op.operands[1]);
    let y = m.ty(op.result());
    let dims = y
        .nchw()
        .ok_or_else(|| Error::verify(m.name_of(op.result()), "Add supports rank <= 4"))?;
    let (mut zp_a, mut zp_b, mut q) = (0, 0, QuantArgs::default());
    if y.dtype == DType::I8 {
        let (qa, qb, qy) = (
            uniform(a, "add lhs")?,
            uniform(b, "add rhs")?,
            uniform(y, "add output")?,
        );
        zp_a = qa.zero_point;
        zp_b = qb.zero_point;
        q = quant_args(op, &qa, &qy, -1.0)?;
        if q.multiplier.len() != 2 || q.rshift.len() != 2 {
            return Err(Error::verify(
                m.name_of(op.result()),
                "INT8 Add needs two requant pairs",
            ));
        }
    }
    Ok(AddDesc {
        dtype: y.dtype,
        n: u(dims[0]),
        c: u(dims[1]),
        h: u(dims[2]),
        w: u(dims[3]),
        a_bcast: a.shape != y.shape,
        b_bcast: b.shape != y.shape,
        zp_a,
        zp_b,
        q,
    })
}

pub fn matmul_desc(m: &ModuleIR, op: &Operation) -> Result<MatMulDesc> {
    let x = m.ty(op.operands[0]);
    let y = m.ty(op.result());
    let k = *x.shape.last().unwrap();
    let n = *y.shape.last().unwrap();
    let limit = relu_limit(op);
    let q = if y.dtype == DType::I8 {
        quant_args(op, &uniform(x, "matmul input")?, &uniform(y, "matmul output")?, limit)?
    } else {
        QuantArgs::default()
    };
    Ok(MatMulDesc {
        dtype: y.dtype,
        m: u(x.num_elements() / k),
        k: u(k),
        n: u(n),
        right_transpose: op.attrs.bool_or("right_transpose", false),
        has_bias: !op.operands[2].is_none(),
        do_relu: op.attrs.bool_or("do_relu", false),
        relu_limit: limit,
        q,
    })
}

pub fn relu_desc(m: &ModuleIR, op: &Operation) -> Result<ReluDesc> {
    let y = m.ty(op.result());
    let limit = relu_limit(op);
    let (zp, amax) = match &y.quant {
        QuantAnnotation::Uniform(q) if y.dtype == DType::I8 => (q.zero_point, act_max(limit, q)),
        _ if y.dtype == DType::I8 => return Err(Error::verify(m.name_of(op.result()), "INT8 Relu needs uniform type")),
        _ => (0, 0),
    };
    Ok(ReluDesc {
        dtype: y.dtype,
        count: u(y.num_elements()),
        relu_limit: limit,
        zp,
        act_max: amax,
    })
}

pub fn softmax_desc(m: &ModuleIR, op: &Operation) -> Result<SoftmaxDesc> {
    let y = m.ty(op.result());
    let rank = y.rank() as i64;
    let mut axis = op.attrs.int_or("axis", -1);
    if axis < 0 {
        axis += rank;
    }
    if axis < 0 || axis >= rank {
        return Err(Error::verify(
            m.name_of(op.result()),
            format!("softmax axis {axis} out of range"),
        ));
    }
    let a = axis as usize;
    Ok(SoftmaxDesc {
        dtype: y.dtype,
        outer: u(y.shape[..a].iter().product()),
        axis: u(y.shape[a]),
        inner: u(y.shape[a + 1..].iter().product()),
    })
}

pub fn cast_desc(m: &ModuleIR, op: &Operation) -> Result<CastDesc> {
    let x = m.ty(op.operands[0]);
    let y = m.ty(op.result());
    let q = match (x.dtype, y.dtype) {
        (DType::I8, _) => Some(uniform(x, "cast input")?),
        (_, DType::I8) => Some(uniform(y, "cast output")?),
        _ => None,
    };
    let (scale, zero_point, qmin, qmax) = q.map_or((1.0, 0, 0, 0), |q| (q.scale, q.zero_point, q.qmin, q.qmax));
    Ok(CastDesc {
        from: x.dtype,
        to: y.dtype,
        count: u(y.num_elements()),
        scale,
        zero_point,
        qmin,
        qmax,
    })
}

/// Kernel and descriptor that execute a compute op over its full tensors.
pub fn kernel_for(m: &ModuleIR, op: &Operation) -> Result<Kernel> {
    Ok(match op.kind() {
        OpKind::Conv => Kernel::Conv(conv_desc(m, op)?),
        OpKind::MaxPool | OpKind::AvgPool => Kernel::Pool(pool_desc(m, op)?),
        OpKind::Add => Kernel::Add(add_desc(m, op)?),
        OpKind::MatMul => Kernel::MatMul(matmul_desc(m, op)?),
        OpKind::Cast => Kernel::Cast(cast_desc(m, op)?),
        OpKind::Relu => Kernel::Relu(relu_desc(m, op)?),
        OpKind::Softmax => Kernel::Softmax(softmax_desc(m, op)?),
        OpKind::Reshape => Kernel::Copy {
            bytes: m.ty(op.result()).num_elements() as u64 * m.ty(op.result()).dtype.byte_size() as u64,
        },
        k => return Err(Error::verify(m.name_of(op.result()), format!("{k:?} has no kernel"))),
    })
}

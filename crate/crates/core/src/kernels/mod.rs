//! Arithmetic kernels shared by the dialect interpreters and the simulator.
//!
//! Every kernel takes a plain descriptor plus contiguous NCHW byte buffers in
//! the descriptor's storage dtype. Float modes widen to F32, compute, and
//! narrow the result; INT8 kernels run the integer requant pipeline. Because
//! the simulator executes the same functions on the same descriptors, its
//! results match `tpu_inference` bit for bit.

mod float;
mod int8;

pub use float::{add_f32, avgpool_f32, conv2d_f32, matmul_f32, maxpool_f32, relu_f32, softmax_f32};
pub use int8::conv2d_int8;

use crate::error::{Error, Result};
use crate::numeric::{
    bf16_to_f32, bytes_to_f32, bytes_to_i32, f16_to_f32, f32_to_bf16, f32_to_bytes, f32_to_f16, round_half_away,
    saturate,
};
use crate::tensor_store::DType;

/// Requant parameters of an integer kernel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantArgs {
    pub zp_in: i32,
    pub zp_out: i32,
    pub qmin: i32,
    pub qmax: i32,
    /// Upper clamp after a fused relu with a limit; `qmax` otherwise.
    pub act_max: i32,
    pub multiplier: Vec<i32>,
    pub rshift: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDesc {
    pub dtype: DType,
    pub n: u32,
    pub ic: u32,
    /// Input rows present in the buffer; may be a halo-extended slice.
    pub ih: u32,
    pub iw: u32,
    pub oc: u32,
    pub oh: u32,
    pub ow: u32,
    pub kh: u32,
    pub kw: u32,
    pub sh: u32,
    pub sw: u32,
    pub dh: u32,
    pub dw: u32,
    /// Padding rows/cols before the first buffered input row/col.
    pub pt: u32,
    pub pl: u32,
    pub group: u32,
    pub has_bias: bool,
    pub do_relu: bool,
    pub relu_limit: f32,
    pub q: QuantArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolDesc {
    pub kind: PoolKind,
    pub dtype: DType,
    pub n: u32,
    pub c: u32,
    pub ih: u32,
    pub iw: u32,
    pub oh: u32,
    pub ow: u32,
    pub kh: u32,
    pub kw: u32,
    pub sh: u32,
    pub sw: u32,
    pub pt: u32,
    pub pl: u32,
    pub count_include_pad: bool,
    /// INT8 average pooling: `multiplier[d-1]`/`rshift[d-1]` divide by `d`.
    pub q: QuantArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddDesc {
    pub dtype: DType,
    pub n: u32,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    /// Operand holds one value per channel (`[1,C,1,1]`).
    pub a_bcast: bool,
    pub b_bcast: bool,
    pub zp_a: i32,
    pub zp_b: i32,
    /// `multiplier[i]`/`rshift[i]` rescale operand `i` to the output scale.
    pub q: QuantArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatMulDesc {
    pub dtype: DType,
    pub m: u32,
    pub k: u32,
    pub n: u32,
    pub right_transpose: bool,
    pub has_bias: bool,
    pub do_relu: bool,
    pub relu_limit: f32,
    pub q: QuantArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CastDesc {
    pub from: DType,
    pub to: DType,
    pub count: u32,
    /// Uniform parameters of whichever side is I8.
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluDesc {
    pub dtype: DType,
    pub count: u32,
    pub relu_limit: f32,
    /// INT8: quantized zero and upper clamp.
    pub zp: i32,
    pub act_max: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxDesc {
    pub dtype: DType,
    pub outer: u32,
    pub axis: u32,
    pub inner: u32,
}

/// Widen a float-typed buffer to F32.
pub fn decode_f32(dtype: DType, bytes: &[u8]) -> Result<Vec<f32>> {
    Ok(match dtype {
        DType::F32 => bytes_to_f32(bytes),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        other => {
            return Err(Error::UnsupportedCast {
                from: other.to_string(),
                to: "f32".into(),
            })
        }
    })
}

/// Narrow F32 values into a float storage dtype with RNE.
pub fn encode_f32(dtype: DType, values: &[f32]) -> Result<Vec<u8>> {
    Ok(match dtype {
        DType::F32 => f32_to_bytes(values),
        DType::BF16 => values.iter().flat_map(|v| f32_to_bf16(*v).to_le_bytes()).collect(),
        DType::F16 => values.iter().flat_map(|v| f32_to_f16(*v).to_le_bytes()).collect(),
        other => {
            return Err(Error::UnsupportedCast {
                from: "f32".into(),
                to: other.to_string(),
            })
        }
    })
}

fn as_i8(bytes: &[u8]) -> &[i8] {
    // SAFETY: i8 and u8 share size and alignment
    unsafe { std::slice::from_raw_parts(bytes.as_ptr() as *const i8, bytes.len()) }
}

fn i8_bytes(values: Vec<i8>) -> Vec<u8> {
    values.into_iter().map(|v| v as u8).collect()
}

pub fn conv2d(d: &ConvDesc, input: &[u8], filter: &[u8], bias: Option<&[u8]>) -> Result<Vec<u8>> {
    if d.dtype == DType::I8 {
        let bias = bias.map(bytes_to_i32);
        let out = int8::conv2d_int8(d, as_i8(input), as_i8(filter), bias.as_deref())?;
        return Ok(i8_bytes(out));
    }
    let x = decode_f32(d.dtype, input)?;
    let w = decode_f32(d.dtype, filter)?;
    let b = bias.map(|b| decode_f32(d.dtype, b)).transpose()?;
    let y = conv2d_f32(d, &x, &w, b.as_deref());
    encode_f32(d.dtype, &y)
}

pub fn pool(d: &PoolDesc, input: &[u8]) -> Result<Vec<u8>> {
    if d.dtype == DType::I8 {
        let out = match d.kind {
            PoolKind::Max => int8::maxpool_int8(d, as_i8(input)),
            PoolKind::Avg => int8::avgpool_int8(d, as_i8(input))?,
        };
        return Ok(i8_bytes(out));
    }
    let x = decode_f32(d.dtype, input)?;
    let y = match d.kind {
        PoolKind::Max => maxpool_f32(d, &x),
        PoolKind::Avg => avgpool_f32(d, &x),
    };
    encode_f32(d.dtype, &y)
}

pub fn add(d: &AddDesc, a: &[u8], b: &[u8]) -> Result<Vec<u8>> {
    if d.dtype == DType::I8 {
        return Ok(i8_bytes(int8::add_int8(d, as_i8(a), as_i8(b))));
    }
    let xa = decode_f32(d.dtype, a)?;
    let xb = decode_f32(d.dtype, b)?;
    encode_f32(d.dtype, &add_f32(d, &xa, &xb))
}

pub fn matmul(d: &MatMulDesc, input: &[u8], right: &[u8], bias: Option<&[u8]>) -> Result<Vec<u8>> {
    if d.dtype == DType::I8 {
        let bias = bias.map(bytes_to_i32);
        let out = int8::matmul_int8(d, as_i8(input), as_i8(right), bias.as_deref())?;
        return Ok(i8_bytes(out));
    }
    let x = decode_f32(d.dtype, input)?;
    let w = decode_f32(d.dtype, right)?;
    let b = bias.map(|b| decode_f32(d.dtype, b)).transpose()?;
    encode_f32(d.dtype, &matmul_f32(d, &x, &w, b.as_deref()))
}

pub fn relu(d: &ReluDesc, input: &[u8]) -> Result<Vec<u8>> {
    if d.dtype == DType::I8 {
        let out = as_i8(input)
            .iter()
            .map(|&q| (q as i32).clamp(d.zp, d.act_max.max(d.zp)) as i8);
        return Ok(out.map(|v| v as u8).collect());
    }
    let mut x = decode_f32(d.dtype, input)?;
    relu_f32(&mut x, d.relu_limit);
    encode_f32(d.dtype, &x)
}

pub fn softmax(d: &SoftmaxDesc, input: &[u8]) -> Result<Vec<u8>> {
    let x = decode_f32(d.dtype, input)?;
    encode_f32(d.dtype, &softmax_f32(d, &x))
}

/// One executable kernel with its descriptor; what a compute instruction
/// carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Conv(ConvDesc),
    Pool(PoolDesc),
    Add(AddDesc),
    MatMul(MatMulDesc),
    Cast(CastDesc),
    Relu(ReluDesc),
    Softmax(SoftmaxDesc),
    /// Byte copy (reshape).
    Copy {
        bytes: u64,
    },
}

impl Kernel {
    /// Number of tensor operands the kernel reads, bias included when present.
    pub fn arity(&self) -> usize {
        match self {
            Kernel::Conv(d) => 2 + d.has_bias as usize,
            Kernel::MatMul(d) => 2 + d.has_bias as usize,
            Kernel::Add(_) => 2,
            _ => 1,
        }
    }

    pub fn run(&self, args: &[&[u8]]) -> Result<Vec<u8>> {
        if args.len() != self.arity() {
            return Err(Error::BadProgram(format!(
                "kernel expects {} operands, got {}",
                self.arity(),
                args.len()
            )));
        }
        match self {
            Kernel::Conv(d) => conv2d(d, args[0], args[1], args.get(2).copied()),
            Kernel::Pool(d) => pool(d, args[0]),
            Kernel::Add(d) => add(d, args[0], args[1]),
            Kernel::MatMul(d) => matmul(d, args[0], args[1], args.get(2).copied()),
            Kernel::Cast(d) => cast(d, args[0]),
            Kernel::Relu(d) => relu(d, args[0]),
            Kernel::Softmax(d) => softmax(d, args[0]),
            Kernel::Copy { .. } => Ok(args[0].to_vec()),
        }
    }
}

/// F32 -> I8 per the uniform map: `saturate(round(x / scale + zp))`.
pub fn quantize_f32(x: f32, scale: f64, zp: i32, qmin: i32, qmax: i32) -> i8 {
    let q = round_half_away(x as f64 / scale + zp as f64);
    if q.is_nan() {
        return saturate(zp as i64, qmin, qmax) as i8;
    }
    q.clamp(qmin as f64, qmax as f64) as i8
}

pub fn dequantize_i8(q: i8, scale: f64, zp: i32) -> f32 {
    ((q as i32 - zp) as f64 * scale) as f32
}

pub fn cast(d: &CastDesc, input: &[u8]) -> Result<Vec<u8>> {
    let unsupported = || Error::UnsupportedCast {
        from: d.from.to_string(),
        to: d.to.to_string(),
    };
    match (d.from, d.to) {
        (f, DType::I8) if f.is_float() => {
            let x = decode_f32(f, input)?;
            Ok(x.iter()
                .map(|&v| quantize_f32(v, d.scale, d.zero_point, d.qmin, d.qmax) as u8)
                .collect())
        }
        (DType::I8, t) if t.is_float() => {
            let x: Vec<f32> = as_i8(input)
                .iter()
                .map(|&q| dequantize_i8(q, d.scale, d.zero_point))
                .collect();
            encode_f32(t, &x)
        }
        (DType::F32, DType::BF16 | DType::F16) | (DType::BF16 | DType::F16, DType::F32) => {
            let x = decode_f32(d.from, input)?;
            encode_f32(d.to, &x)
        }
        _ => Err(unsupported()),
    }
}

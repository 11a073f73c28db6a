//! TPU dialect inference over storage-typed buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ir::{ModuleIR, OpKind, QuantAnnotation, TensorType, ValueId};
use crate::kernels::{self, decode_f32, dequantize_i8, CastDesc};
use crate::numeric::{bytes_to_i32, f32_to_bytes};
use crate::ops;
use crate::tensor_store::{DType, HostTensor, TensorMap};
use crate::top::weight_read;

pub use crate::kernels::conv2d_int8;

/// Converts a buffer between storage types. Pairs: F32/BF16/F16 <-> I8 with
/// a uniform annotation on the I8 side, and F32 <-> BF16/F16.
pub fn cast_apply(x: &[u8], from: &TensorType, to: &TensorType) -> Result<Vec<u8>> {
    let unsupported = || Error::UnsupportedCast {
        from: from.dtype.to_string(),
        to: to.dtype.to_string(),
    };
    let q = match (from.dtype, to.dtype) {
        (DType::I8, DType::I8) => return Err(unsupported()),
        (DType::I8, _) => Some(from.quant.uniform().ok_or_else(unsupported)?),
        (_, DType::I8) => Some(to.quant.uniform().ok_or_else(unsupported)?),
        _ => None,
    };
    let d = CastDesc {
        from: from.dtype,
        to: to.dtype,
        count: from.num_elements() as u32,
        scale: q.map_or(1.0, |q| q.scale),
        zero_point: q.map_or(0, |q| q.zero_point),
        qmin: q.map_or(0, |q| q.qmin),
        qmax: q.map_or(0, |q| q.qmax),
    };
    kernels::cast(&d, x)
}

/// A storage buffer read back as real values: floats widen, uniform I8
/// dequantizes, I32 with a per-axis annotation rescales per channel.
pub fn dequantize_value(ty: &TensorType, bytes: &[u8]) -> Result<Vec<f32>> {
    match (ty.dtype, &ty.quant) {
        (d, _) if d.is_float() => decode_f32(d, bytes),
        (DType::I8, QuantAnnotation::Uniform(q)) => Ok(bytes
            .iter()
            .map(|b| dequantize_i8(*b as i8, q.scale, q.zero_point))
            .collect()),
        (DType::I8 | DType::I32, QuantAnnotation::UniformPerAxis(p)) => {
            let dim = ty.shape[p.axis];
            let inner: usize = ty.shape[p.axis + 1..].iter().product();
            let raw: Vec<i64> = if ty.dtype == DType::I8 {
                bytes.iter().map(|b| *b as i8 as i64).collect()
            } else {
                bytes_to_i32(bytes).into_iter().map(i64::from).collect()
            };
            Ok(raw
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let c = (i / inner) % dim;
                    ((q - p.zero_points[c] as i64) as f64 * p.scales[c]) as f32
                })
                .collect())
        }
        (d, _) => Err(Error::UnsupportedCast {
            from: d.to_string(),
            to: "f32 dump".into(),
        }),
    }
}

/// Raw storage bytes of every value after a TPU-dialect run.
pub fn tpu_execute(m: &ModuleIR, inputs: &TensorMap) -> Result<HashMap<ValueId, Vec<u8>>> {
    if m.state.is_top() {
        return Err(Error::WrongState {
            expected: "TPU_LOWERED or TPU_ADDRESSED".into(),
            found: m.state.to_string(),
        });
    }
    let mut bufs: HashMap<ValueId, Vec<u8>> = HashMap::new();
    for op in m.flat_compute_ops() {
        let v = op.result();
        match op.kind() {
            OpKind::Input => {
                let name = m.name_of(v);
                let t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.to_string()))?;
                let ty = m.ty(v);
                if t.num_elements() != ty.num_elements() || t.dtype != DType::F32 {
                    return Err(Error::BadInput {
                        name: name.to_string(),
                        reason: format!("expected f32 {:?}, got {} {:?}", ty.shape, t.dtype, t.shape),
                    });
                }
                bufs.insert(v, f32_to_bytes(&t.to_f32_vec()?));
            }
            OpKind::Weight => {
                bufs.insert(v, weight_read(m, op)?.data.clone());
            }
            _ => {
                let k = ops::kernel_for(m, op)?;
                let args: Vec<&[u8]> = op.present_operands().map(|x| bufs[&x].as_slice()).collect();
                let y = k.run(&args)?;
                bufs.insert(v, y);
            }
        }
    }
    Ok(bufs)
}

/// Runs a lowered module and returns every non-weight value as dequantized
/// F32, keyed by location. Group bodies run in place.
pub fn tpu_inference(m: &ModuleIR, inputs: &TensorMap) -> Result<TensorMap> {
    let bufs = tpu_execute(m, inputs)?;
    let mut out = TensorMap::new();
    for v in m.live_values() {
        if m.is_weight(v) {
            continue;
        }
        let ty = m.ty(v);
        let name = m.name_of(v).to_string();
        let vals = dequantize_value(ty, &bufs[&v])?;
        out.insert(name.clone(), HostTensor::from_f32(name, ty.shape.clone(), &vals)?);
    }
    Ok(out)
}

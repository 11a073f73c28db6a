//! TOP dialect: weights, reference F32 inference and FLOPs counting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ir::{AttrMapExt, ModuleIR, OpKind, Opcode, Operation, TensorType, ValueId};
use crate::kernels::{add_f32, avgpool_f32, conv2d_f32, matmul_f32, maxpool_f32, relu_f32, softmax_f32};
use crate::ops;
use crate::tensor_store::{tensor_byte_size, DType, HostTensor, TensorMap};

/// The weight tensor a Weight op names, checked against its declared type.
pub fn weight_read<'a>(m: &'a ModuleIR, op: &Operation) -> Result<&'a HostTensor> {
    let v = op.result();
    let name = m.name_of(v);
    let t = m
        .weights
        .get(name)
        .ok_or_else(|| Error::WeightNotFound(name.to_string()))?;
    let declared = m.ty(v);
    if t.shape != declared.shape {
        return Err(Error::WeightShapeMismatch {
            name: name.to_string(),
            declared: declared.shape.clone(),
            found: t.shape.clone(),
        });
    }
    if t.dtype != declared.dtype {
        return Err(Error::BadTensor {
            name: name.to_string(),
            reason: format!("stored as {}, declared {}", t.dtype, declared.dtype),
        });
    }
    Ok(t)
}

/// New Weight op named `<owner>_<suffix>` holding `data`, placed after the
/// leading Input/Weight ops.
pub fn weight_create(m: &mut ModuleIR, owner: &str, suffix: &str, data: HostTensor) -> Result<ValueId> {
    weight_insert(m, format!("{owner}_{suffix}"), data)
}

/// Like [`weight_create`] with the full name given.
pub fn weight_insert(m: &mut ModuleIR, name: String, data: HostTensor) -> Result<ValueId> {
    if m.weights.contains_key(&name) || m.find_value(&name).is_some() {
        return Err(Error::DuplicateWeight(name));
    }
    let dialect_op = if m.state.is_top() {
        Opcode::top(OpKind::Weight)
    } else {
        Opcode::tpu(OpKind::Weight)
    };
    let id = m.add_value(name.clone(), TensorType::new(data.shape.clone(), data.dtype));
    let at = m
        .ops
        .iter()
        .position(|op| !matches!(op.kind(), OpKind::Input | OpKind::Weight))
        .unwrap_or(m.ops.len());
    m.ops.insert(at, Operation::new(dialect_op, vec![], vec![id]));
    m.weights.insert(name.clone(), data.with_name(name));
    Ok(id)
}

/// Host buffers for one inference run, keyed by value.
#[derive(Debug, Default)]
pub struct InferenceContext {
    pub buffers: BTreeMap<ValueId, Vec<f32>>,
    pub total_bytes: usize,
}

fn alloc(len: usize) -> Result<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::OutOfHostMemory(len * 4))?;
    v.resize(len, 0.0);
    Ok(v)
}

/// One F32 buffer per value, weights first and filled from the weight map.
pub fn allocate_buffers(m: &ModuleIR) -> Result<InferenceContext> {
    let mut ctx = InferenceContext::default();
    let producers = m.producers();
    let mut order = m.weight_values();
    order.extend(m.live_values().into_iter().filter(|v| !m.is_weight(*v)));
    for v in order {
        let ty = m.ty(v);
        let bytes = tensor_byte_size(&ty.shape, DType::F32)?;
        let mut buf = alloc(ty.num_elements())?;
        if producers.get(&v).is_some_and(|op| op.kind() == OpKind::Weight) {
            let t = weight_read(m, producers[&v])?;
            let vals = t.to_f32_vec()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidWeight(m.name_of(v).to_string()));
            }
            buf.copy_from_slice(&vals);
        }
        ctx.total_bytes += bytes;
        ctx.buffers.insert(v, buf);
    }
    Ok(ctx)
}

/// Bind network inputs by name into the context.
pub(crate) fn bind_inputs(m: &ModuleIR, ctx: &mut InferenceContext, inputs: &TensorMap) -> Result<()> {
    for &v in &m.inputs {
        let name = m.name_of(v);
        let t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.to_string()))?;
        let ty = m.ty(v);
        if t.num_elements() != ty.num_elements() || t.dtype != DType::F32 {
            return Err(Error::BadInput {
                name: name.to_string(),
                reason: format!("expected f32 {:?}, got {} {:?}", ty.shape, t.dtype, t.shape),
            });
        }
        ctx.buffers.insert(v, t.to_f32_vec()?);
    }
    Ok(())
}

fn batchnorm(x: &[f32], c: usize, inner: usize, p: [&[f32]; 4], eps: f32) -> Vec<f32> {
    let [gamma, beta, mean, var] = p;
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / inner) % c;
            (v - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch]
        })
        .collect()
}

fn run_op(m: &ModuleIR, op: &Operation, ctx: &InferenceContext) -> Result<Vec<f32>> {
    let arg = |i: usize| -> Option<&[f32]> {
        let v = op.operands[i];
        (!v.is_none()).then(|| ctx.buffers[&v].as_slice())
    };
    let x = arg(0).unwrap_or(&[]);
    Ok(match op.kind() {
        OpKind::Conv => conv2d_f32(&ops::conv_desc(m, op)?, x, arg(1).unwrap(), arg(2)),
        OpKind::Relu => {
            let mut y = x.to_vec();
            relu_f32(&mut y, ops::relu_limit(op));
            y
        }
        OpKind::BatchNorm => {
            let shape = &m.ty(op.operands[0]).shape;
            let inner = shape[2..].iter().product();
            let eps = op.attrs.float_or("epsilon", 1e-5) as f32;
            let p = [arg(1).unwrap(), arg(2).unwrap(), arg(3).unwrap(), arg(4).unwrap()];
            batchnorm(x, shape[1], inner, p, eps)
        }
        OpKind::Add => add_f32(&ops::add_desc(m, op)?, x, arg(1).unwrap()),
        OpKind::MaxPool => maxpool_f32(&ops::pool_desc(m, op)?, x),
        OpKind::AvgPool => avgpool_f32(&ops::pool_desc(m, op)?, x),
        OpKind::MatMul => matmul_f32(&ops::matmul_desc(m, op)?, x, arg(1).unwrap(), arg(2)),
        OpKind::Softmax => softmax_f32(&ops::softmax_desc(m, op)?, x),
        OpKind::Reshape => x.to_vec(),
        k => {
            return Err(Error::verify(
                m.name_of(op.result()),
                format!("{k:?} cannot run in TOP inference"),
            ))
        }
    })
}

/// Runs the module on host F32 and returns every non-weight value by name.
pub fn top_inference(m: &ModuleIR, inputs: &TensorMap) -> Result<TensorMap> {
    if !m.state.is_top() {
        return Err(Error::WrongState {
            expected: "TOP_F32 or TOP_CALIBRATED".into(),
            found: m.state.to_string(),
        });
    }
    let mut ctx = allocate_buffers(m)?;
    bind_inputs(m, &mut ctx, inputs)?;
    for op in &m.ops {
        if matches!(op.kind(), OpKind::Input | OpKind::Weight) {
            continue;
        }
        let y = run_op(m, op, &ctx)?;
        ctx.buffers.insert(op.result(), y);
    }
    let mut out = TensorMap::new();
    for v in m.live_values() {
        if m.is_weight(v) {
            continue;
        }
        let name = m.name_of(v).to_string();
        let t = HostTensor::from_f32(name.clone(), m.ty(v).shape.clone(), &ctx.buffers[&v])?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Conv: `out * (2*kh*kw*Cin/group + bias + relu)`; MatMul: `2MKN + bias*MN`;
/// pools: `out * kh*kw`; other elementwise ops: `out`; Input/Weight/Reshape: 0.
pub fn top_flops(m: &ModuleIR) -> u64 {
    m.flat_compute_ops().into_iter().map(|op| op_flops(m, op)).sum()
}

pub fn op_flops(m: &ModuleIR, op: &Operation) -> u64 {
    if op.results.is_empty() {
        return 0;
    }
    let out = m.ty(op.result()).num_elements() as u64;
    match op.kind() {
        OpKind::Input | OpKind::Weight | OpKind::Reshape | OpKind::Cast => 0,
        OpKind::Conv => {
            let w = &m.ty(op.operands[1]).shape;
            let per = 2 * (w[1] * w[2] * w[3]) as u64
                + !op.operands[2].is_none() as u64
                + op.attrs.bool_or("do_relu", false) as u64;
            out * per
        }
        OpKind::MatMul => {
            let x = &m.ty(op.operands[0]).shape;
            let k = *x.last().unwrap() as u64;
            let mm = out / *m.ty(op.result()).shape.last().unwrap() as u64;
            let n = out / mm.max(1);
            2 * mm * k * n + (!op.operands[2].is_none() as u64) * mm * n
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let win = ops::window(op, None).map(|w| (w.kh * w.kw) as u64).unwrap_or(1);
            out * win
        }
        _ => out,
    }
}

use crate::error::{Error, Result};
use crate::ir::{AttrMapExt, Attribute, ModuleIR, ModuleState, OpKind, Opcode, Operation, ValueId};
use crate::tensor_store::HostTensor;
use crate::top::{weight_insert, weight_read};

/// Applies the TOP rewrites until none fires, then drops dead ops:
/// Relu into a single-use Conv/MatMul producer, BatchNorm into a depthwise
/// 1x1 Conv, and Reshape-of-Reshape into one Reshape.
pub fn canonicalize(m: &ModuleIR) -> Result<ModuleIR> {
    if m.state != ModuleState::TopF32 {
        return Err(Error::WrongState {
            expected: "TOP_F32".into(),
            found: m.state.to_string(),
        });
    }
    let mut m = m.clone();
    loop {
        m.remove_dead_ops();
        if fuse_relu(&mut m) || fold_batchnorm(&mut m)? || collapse_reshape(&mut m) {
            continue;
        }
        break;
    }
    m.compact();
    Ok(m)
}

fn producer_index(m: &ModuleIR, v: ValueId) -> Option<usize> {
    m.ops.iter().position(|op| op.results.contains(&v))
}

fn fuse_relu(m: &mut ModuleIR) -> bool {
    let uses = m.use_counts();
    for i in 0..m.ops.len() {
        let relu = &m.ops[i];
        if relu.kind() != OpKind::Relu {
            continue;
        }
        let src = relu.operands[0];
        let Some(p) = producer_index(m, src) else {
            continue;
        };
        let prod = &m.ops[p];
        if !matches!(prod.kind(), OpKind::Conv | OpKind::MatMul)
            || prod.attrs.bool_or("do_relu", false)
            || uses.get(&src).copied().unwrap_or(0) != 1
        {
            continue;
        }
        let limit = relu.attrs.float_or("relu_limit", -1.0);
        let out = relu.result();
        let name = m.name_of(out).to_string();
        let prod = &mut m.ops[p];
        prod.set_attr("do_relu", Attribute::Bool(true));
        prod.set_attr("relu_limit", Attribute::Float(limit));
        m.ops.remove(i);
        m.replace_uses(out, src);
        m.value_mut(src).name = name;
        return true;
    }
    false
}

fn weight_f32(m: &ModuleIR, v: ValueId) -> Option<Vec<f32>> {
    let op = m
        .ops
        .iter()
        .find(|op| op.kind() == OpKind::Weight && op.result() == v)?;
    weight_read(m, op).ok()?.to_f32_vec().ok()
}

fn fold_batchnorm(m: &mut ModuleIR) -> Result<bool> {
    for i in 0..m.ops.len() {
        let op = &m.ops[i];
        if op.kind() != OpKind::BatchNorm || m.ty(op.operands[0]).rank() != 4 {
            continue;
        }
        let params: Option<Vec<Vec<f32>>> = op.operands[1..].iter().map(|v| weight_f32(m, *v)).collect();
        let Some(params) = params else { continue };
        let eps = op.attrs.float_or("epsilon", 1e-5);
        let c = m.ty(op.operands[0]).shape[1];
        let (mut w, mut b) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for ch in 0..c {
            let (gamma, beta, mean, var) = (
                params[0][ch] as f64,
                params[1][ch] as f64,
                params[2][ch] as f64,
                params[3][ch] as f64,
            );
            let scale = gamma / (var + eps).sqrt();
            w.push(scale as f32);
            b.push((beta - mean * scale) as f32);
        }
        let input = op.operands[0];
        let out = op.result();
        let owner = m.name_of(out).to_string();
        let fname = m.unique_name(&format!("{owner}_filter"));
        let filter = weight_insert(m, fname, HostTensor::from_f32("", vec![c, 1, 1, 1], &w)?)?;
        let bname = m.unique_name(&format!("{owner}_bias"));
        let bias = weight_insert(m, bname, HostTensor::from_f32("", vec![c], &b)?)?;
        let conv = Operation::new(Opcode::top(OpKind::Conv), vec![input, filter, bias], vec![out])
            .with_attr("kernel_shape", Attribute::IntArray(vec![1, 1]))
            .with_attr("strides", Attribute::IntArray(vec![1, 1]))
            .with_attr("pads", Attribute::IntArray(vec![0; 4]))
            .with_attr("dilations", Attribute::IntArray(vec![1, 1]))
            .with_attr("group", Attribute::Int(c as i64))
            .with_attr("do_relu", Attribute::Bool(false))
            .with_attr("relu_limit", Attribute::Float(-1.0));
        let at = producer_index(m, out).expect("batchnorm still present");
        m.ops[at] = conv;
        return Ok(true);
    }
    Ok(false)
}

fn collapse_reshape(m: &mut ModuleIR) -> bool {
    for i in 0..m.ops.len() {
        if m.ops[i].kind() != OpKind::Reshape {
            continue;
        }
        let src = m.ops[i].operands[0];
        let Some(p) = producer_index(m, src) else {
            continue;
        };
        if m.ops[p].kind() == OpKind::Reshape {
            let inner_src = m.ops[p].operands[0];
            m.ops[i].operands[0] = inner_src;
            return true;
        }
    }
    false
}

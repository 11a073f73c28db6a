//! TOP -> TPU conversion for one precision mode.

mod quant;

use std::collections::{HashMap, HashSet};

pub use quant::{
    derive_requant, derive_uniform, per_axis_i8, quantize_bias, quantize_tensor, weight_per_axis, weight_per_axis_at,
    SCALE_FLOOR,
};

use crate::error::{Error, Result};
use crate::ir::{
    verify_module, AttrMapExt, Attribute, ChipConfig, Mode, ModuleIR, ModuleState, OpKind, Opcode, Operation,
    QuantAnnotation, TensorType, UniformQuant, ValueId,
};
use crate::kernels::encode_f32;
use crate::tensor_store::{DType, HostTensor};
use crate::top::{weight_create, weight_read};

#[derive(Debug, Clone, PartialEq)]
pub struct LoweringOptions {
    pub mode: Mode,
    pub chip: String,
    pub asymmetric: bool,
}

impl LoweringOptions {
    pub fn new(mode: Mode) -> Self {
        LoweringOptions {
            mode,
            chip: ChipConfig::default().name,
            asymmetric: false,
        }
    }
}

/// Storage dtype of activations in a mode.
pub fn mode_dtype(mode: Mode) -> DType {
    match mode {
        Mode::Int8 => DType::I8,
        Mode::Bf16 => DType::BF16,
        Mode::F16 => DType::F16,
        Mode::F32 => DType::F32,
    }
}

fn suffix(dt: DType) -> &'static str {
    match dt {
        DType::I8 => "i8",
        DType::BF16 => "bf16",
        DType::F16 => "f16",
        DType::F32 => "f32",
        DType::U8 => "u8",
        DType::I32 => "i32",
    }
}

pub fn lower_module(m: &ModuleIR, opts: &LoweringOptions) -> Result<ModuleIR> {
    let chip = ChipConfig::by_name(&opts.chip)?;
    if !chip.supports(opts.mode) {
        return Err(Error::UnsupportedMode {
            mode: opts.mode.to_string(),
            chip: chip.name,
        });
    }
    if !m.state.is_top() {
        return Err(Error::WrongState {
            expected: "TOP_F32 or TOP_CALIBRATED".into(),
            found: m.state.to_string(),
        });
    }
    if opts.mode == Mode::Int8 && m.state != ModuleState::TopCalibrated {
        return Err(Error::NotCalibrated);
    }
    verify_module(m)?;
    if let Some(op) = m.ops.iter().find(|op| op.kind() == OpKind::BatchNorm) {
        return Err(Error::UnsupportedOp {
            name: m.name_of(op.result()).to_string(),
            op_type: "top.BatchNorm (run canonicalize first)".into(),
        });
    }

    let mut out = ModuleIR::new(m.name.clone(), m.weight_file.clone());
    out.values = m.values.clone();
    out.state = ModuleState::TpuLowered;
    out.chip = Some(chip.name.clone());
    out.mode = Some(opts.mode);
    out.asymmetric = opts.asymmetric && opts.mode == Mode::Int8;
    let reserved = m.live_values().into_iter().map(|v| m.name_of(v).to_string()).collect();
    let mut l = Lowerer {
        src: m,
        out,
        mode: opts.mode,
        dt: mode_dtype(opts.mode),
        asym: opts.asymmetric,
        cur: HashMap::new(),
        casts: HashMap::new(),
        reserved,
    };
    for op in &m.ops {
        l.op(op)?;
    }
    l.finish_outputs()?;
    let mut out = l.out;
    out.remove_dead_ops();
    // weights ahead of compute so groupable runs stay contiguous
    out.ops.sort_by_key(|op| match op.kind() {
        OpKind::Input => 0,
        OpKind::Weight => 1,
        _ => 2,
    });
    out.compact();
    verify_module(&out)?;
    Ok(out)
}

struct Lowerer<'a> {
    src: &'a ModuleIR,
    out: ModuleIR,
    mode: Mode,
    dt: DType,
    asym: bool,
    /// Replacement for a source value after boundary casts.
    cur: HashMap<ValueId, ValueId>,
    casts: HashMap<(ValueId, DType), ValueId>,
    reserved: HashSet<String>,
}

impl Lowerer<'_> {
    fn fresh(&mut self, base: &str) -> String {
        let mut name = base.to_string();
        let mut i = 1;
        while self.reserved.contains(&name)
            || self.out.find_value(&name).is_some()
            || self.out.weights.contains_key(&name)
        {
            name = format!("{base}_{i}");
            i += 1;
        }
        self.reserved.insert(name.clone());
        name
    }

    fn map(&self, v: ValueId) -> ValueId {
        if v.is_none() {
            return v;
        }
        *self.cur.get(&v).unwrap_or(&v)
    }

    fn calibrated(&self, v: ValueId) -> Result<(f64, f64)> {
        self.src
            .ty(v)
            .quant
            .calibrated()
            .ok_or_else(|| Error::MissingCalibration(self.src.name_of(v).to_string()))
    }

    fn uniform_of(&self, v: ValueId) -> Result<UniformQuant> {
        let (lo, hi) = self.calibrated(v)?;
        Ok(derive_uniform(lo, hi, self.asym))
    }

    fn is_src_weight(&self, v: ValueId) -> Option<&Operation> {
        self.src
            .ops
            .iter()
            .find(|op| op.kind() == OpKind::Weight && op.result() == v)
    }

    fn push(&mut self, op: Operation) {
        self.out.ops.push(op);
    }

    /// Value `v` (already mapped) converted to `to`, inserting a Cast once.
    fn cast_to(&mut self, v: ValueId, to: DType, quant: QuantAnnotation) -> ValueId {
        if self.out.ty(v).dtype == to {
            return v;
        }
        if let Some(c) = self.casts.get(&(v, to)) {
            return *c;
        }
        let base = self.out.name_of(v).to_string();
        let name = self.fresh(&format!("{base}_{}", suffix(to)));
        let ty = TensorType::new(self.out.ty(v).shape.clone(), to).with_quant(quant);
        let id = self.out.add_value(name, ty);
        self.push(Operation::new(Opcode::tpu(OpKind::Cast), vec![v], vec![id]));
        self.casts.insert((v, to), id);
        id
    }

    /// Operand `v` as INT8 codes.
    fn int8_operand(&mut self, src_v: ValueId) -> Result<ValueId> {
        let v = self.map(src_v);
        if self.out.ty(v).dtype == DType::I8 {
            return Ok(v);
        }
        let q = self.uniform_of(src_v)?;
        Ok(self.cast_to(v, DType::I8, QuantAnnotation::Uniform(q)))
    }

    fn set_result(&mut self, v: ValueId, ty: TensorType) {
        self.out.value_mut(v).ty = ty;
    }

    fn weight_tensor(&self, v: ValueId) -> Result<&HostTensor> {
        let op = self.is_src_weight(v).ok_or_else(|| Error::UnsupportedOp {
            name: self.src.name_of(v).to_string(),
            op_type: "INT8 op needs a weight operand here".into(),
        })?;
        weight_read(self.src, op)
    }

    fn op(&mut self, op: &Operation) -> Result<()> {
        match op.kind() {
            OpKind::Input => {
                let v = op.result();
                let mut ty = self.src.ty(v).clone();
                if self.mode != Mode::Int8 {
                    ty.quant = QuantAnnotation::None;
                }
                self.set_result(v, ty);
                self.push(Operation::new(Opcode::tpu(OpKind::Input), vec![], vec![v]));
                let quant = match self.mode {
                    Mode::Int8 => QuantAnnotation::Uniform(self.uniform_of(v)?),
                    _ => QuantAnnotation::None,
                };
                if self.mode != Mode::F32 {
                    let c = self.cast_to(v, self.dt, quant);
                    self.cur.insert(v, c);
                }
                Ok(())
            }
            OpKind::Weight => {
                if self.mode == Mode::Int8 {
                    // quantized per consumer
                    return Ok(());
                }
                let v = op.result();
                let t = weight_read(self.src, op)?;
                let data = if self.dt == DType::F32 {
                    t.clone()
                } else {
                    HostTensor::new(
                        t.name.clone(),
                        t.shape.clone(),
                        self.dt,
                        encode_f32(self.dt, &t.to_f32_vec()?)?,
                    )?
                };
                self.out.weights.insert(t.name.clone(), data);
                self.set_result(v, TensorType::new(self.src.ty(v).shape.clone(), self.dt));
                self.push(Operation::new(Opcode::tpu(OpKind::Weight), vec![], vec![v]));
                Ok(())
            }
            _ if self.mode == Mode::Int8 => self.int8_op(op),
            _ => {
                let mut new = op.clone();
                new.opcode = Opcode::tpu(op.kind());
                new.operands = op.operands.iter().map(|v| self.map(*v)).collect();
                let v = op.result();
                self.set_result(v, TensorType::new(self.src.ty(v).shape.clone(), self.dt));
                self.push(new);
                Ok(())
            }
        }
    }

    fn int8_op(&mut self, op: &Operation) -> Result<()> {
        let v = op.result();
        let name = self.src.name_of(v).to_string();
        let shape = self.src.ty(v).shape.clone();
        let mut new = op.clone();
        new.opcode = Opcode::tpu(op.kind());
        let i8_ty = |q: UniformQuant| TensorType::new(shape.clone(), DType::I8).with_quant(QuantAnnotation::Uniform(q));
        match op.kind() {
            OpKind::Conv | OpKind::MatMul => {
                let x = self.int8_operand(op.operands[0])?;
                let s_in = self.out.ty(x).quant.uniform().unwrap().scale;
                let wt = self.weight_tensor(op.operands[1])?.clone();
                let axis = match (op.kind(), op.attrs.bool_or("right_transpose", false)) {
                    (OpKind::Conv, _) | (_, true) => 0,
                    (_, false) => 1,
                };
                let (_, s_w) = weight_per_axis_at(&wt, axis)?;
                let wq = per_axis_i8(s_w.clone(), axis);
                let qdata = quantize_tensor(&wt, &wq)?;
                let w = weight_create(&mut self.out, &name, "filter_i8", qdata)?;
                self.out.value_mut(w).ty.quant = wq;
                let mut b = ValueId::NONE;
                if !op.operands[2].is_none() {
                    let bt = self.weight_tensor(op.operands[2])?;
                    let bq = quantize_bias(&bt.to_f32_vec()?, s_in, &s_w);
                    let data = HostTensor::from_i32("", bt.shape.clone(), &bq)?;
                    b = weight_create(&mut self.out, &name, "bias_i32", data)?;
                    let scales: Vec<f64> = s_w.iter().map(|s| s * s_in).collect();
                    self.out.value_mut(b).ty.quant = QuantAnnotation::UniformPerAxis(crate::ir::PerAxisQuant {
                        zero_points: vec![0; scales.len()],
                        scales,
                        axis: 0,
                        qmin: i32::MIN,
                        qmax: i32::MAX,
                        storage: DType::I32,
                        expressed: DType::F32,
                    });
                }
                let yq = self.uniform_of(v)?;
                let (mult, shift) = derive_requant(s_in, &s_w, yq.scale)?;
                new.operands = vec![x, w, b];
                new.set_attr(
                    "multiplier",
                    Attribute::IntArray(mult.iter().map(|m| *m as i64).collect()),
                );
                new.set_attr("rshift", Attribute::IntArray(shift.iter().map(|r| *r as i64).collect()));
                self.set_result(v, i8_ty(yq));
            }
            OpKind::Add => {
                let mut operands = Vec::new();
                let mut scales = Vec::new();
                for (i, &src) in op.operands.iter().enumerate() {
                    let x = if self.is_src_weight(src).is_some() {
                        let t = self.weight_tensor(src)?.clone();
                        let absmax = t.to_f32_vec()?.iter().fold(0f64, |a, v| a.max(v.abs() as f64));
                        let q = derive_uniform(-absmax, absmax, false);
                        let data = quantize_tensor(&t, &QuantAnnotation::Uniform(q.clone()))?;
                        let w = weight_create(&mut self.out, &name, &format!("in{i}_i8"), data)?;
                        self.out.value_mut(w).ty.quant = QuantAnnotation::Uniform(q);
                        w
                    } else {
                        self.int8_operand(src)?
                    };
                    scales.push(self.out.ty(x).quant.uniform().unwrap().scale);
                    operands.push(x);
                }
                let yq = self.uniform_of(v)?;
                let (m0, r0) = derive_requant(scales[0], &[1.0], yq.scale)?;
                let (m1, r1) = derive_requant(scales[1], &[1.0], yq.scale)?;
                new.operands = operands;
                new.set_attr("multiplier", Attribute::IntArray(vec![m0[0] as i64, m1[0] as i64]));
                new.set_attr("rshift", Attribute::IntArray(vec![r0[0] as i64, r1[0] as i64]));
                self.set_result(v, i8_ty(yq));
            }
            OpKind::AvgPool => {
                let x = self.int8_operand(op.operands[0])?;
                let s_in = self.out.ty(x).quant.uniform().unwrap().scale;
                let yq = self.uniform_of(v)?;
                let win = crate::ops::window(op, None)?;
                let divs: Vec<f64> = (1..=win.kh * win.kw).map(|d| 1.0 / d as f64).collect();
                let (mult, shift) = derive_requant(s_in, &divs, yq.scale)?;
                new.operands = vec![x];
                new.set_attr(
                    "multiplier",
                    Attribute::IntArray(mult.iter().map(|m| *m as i64).collect()),
                );
                new.set_attr("rshift", Attribute::IntArray(shift.iter().map(|r| *r as i64).collect()));
                self.set_result(v, i8_ty(yq));
            }
            OpKind::Relu | OpKind::MaxPool | OpKind::Reshape => {
                let x = self.int8_operand(op.operands[0])?;
                let q = self.out.ty(x).quant.uniform().unwrap().clone();
                new.operands = vec![x];
                self.set_result(v, i8_ty(q));
            }
            OpKind::Softmax => {
                let src = op.operands[0];
                let x = self.map(src);
                let x = if self.out.ty(x).dtype == DType::I8 {
                    self.cast_to(x, DType::F32, QuantAnnotation::None)
                } else {
                    x
                };
                new.operands = vec![x];
                self.set_result(v, TensorType::f32(shape.clone()));
            }
            k => {
                return Err(Error::UnsupportedOp {
                    name,
                    op_type: format!("{k:?}"),
                })
            }
        }
        self.push(new);
        Ok(())
    }

    /// Every network output leaves as F32; the pre-cast value is renamed
    /// `<name>_<dtype>` and the cast keeps the original name.
    fn finish_outputs(&mut self) -> Result<()> {
        let outputs: Vec<ValueId> = self.src.outputs.iter().map(|v| self.map(*v)).collect();
        let mut mapped = Vec::new();
        for (i, v) in outputs.into_iter().enumerate() {
            let ty = self.out.ty(v).clone();
            if ty.dtype == DType::F32 {
                mapped.push(v);
                continue;
            }
            let orig = self.src.name_of(self.src.outputs[i]).to_string();
            let renamed = self.fresh(&format!("{orig}_{}", suffix(ty.dtype)));
            self.out.value_mut(v).name = renamed;
            let id = self.out.add_value(orig, TensorType::f32(ty.shape.clone()));
            self.push(Operation::new(Opcode::tpu(OpKind::Cast), vec![v], vec![id]));
            mapped.push(id);
        }
        self.out.inputs = self.src.inputs.clone();
        self.out.outputs = mapped;
        Ok(())
    }
}

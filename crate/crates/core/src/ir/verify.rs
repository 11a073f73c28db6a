use std::collections::HashSet;

use crate::error::{Error, Result};

use super::attr::Attribute;
use super::chip::ChipConfig;
use super::module::{ModuleIR, Operation};
use super::opcode::{Arity, Dialect, OpKind};
use super::types::{QuantAnnotation, TensorType, ValueId};

/// Checks SSA order, signatures, types and state consistency; the error
/// names the first violation found.
pub fn verify_module(m: &ModuleIR) -> Result<()> {
    let dialect = if m.state.is_top() { Dialect::Top } else { Dialect::Tpu };
    let chip = m.chip.as_deref().and_then(|c| ChipConfig::by_name(c).ok());
    let mut v = Verifier {
        m,
        dialect,
        chip,
        defined: HashSet::new(),
        names: HashSet::new(),
    };
    v.block(&m.ops, None)?;

    for &i in &m.inputs {
        let is_input = m
            .ops
            .iter()
            .any(|op| op.kind() == OpKind::Input && op.results.first() == Some(&i));
        if !is_input {
            return Err(Error::verify(
                "module",
                format!("input %{} is not a top-level Input op", i.0),
            ));
        }
    }
    let n_inputs = m.ops.iter().filter(|op| op.kind() == OpKind::Input).count();
    if n_inputs != m.inputs.len() {
        return Err(Error::verify("module", "Input ops and module inputs disagree"));
    }
    for &o in &m.outputs {
        if !v.defined.contains(&o) {
            return Err(Error::verify("module", format!("output %{} is not defined", o.0)));
        }
    }
    Ok(())
}

struct Verifier<'a> {
    m: &'a ModuleIR,
    dialect: Dialect,
    chip: Option<ChipConfig>,
    defined: HashSet<ValueId>,
    names: HashSet<&'a str>,
}

impl<'a> Verifier<'a> {
    fn name(&self, op: &Operation) -> String {
        match op.results.first() {
            Some(r) if r.index() < self.m.values.len() => self.m.name_of(*r).to_string(),
            _ => op.opcode.to_string(),
        }
    }

    fn block(&mut self, ops: &'a [Operation], parent: Option<&'a Operation>) -> Result<()> {
        for (i, op) in ops.iter().enumerate() {
            let last = i + 1 == ops.len();
            self.op(op, parent, last)?;
        }
        if let Some(group) = parent {
            match ops.last() {
                Some(op) if op.kind() == OpKind::Yield => {}
                _ => return Err(Error::verify(self.name(group), "group body must end with tpu.Yield")),
            }
        }
        Ok(())
    }

    fn op(&mut self, op: &'a Operation, parent: Option<&'a Operation>, last: bool) -> Result<()> {
        let name = self.name(op);
        if !op.opcode.is_valid() || op.opcode.dialect != self.dialect {
            return Err(Error::verify(
                name,
                format!("{} not allowed in state {}", op.opcode, self.m.state),
            ));
        }
        let sig = op.opcode.signature();
        if let Arity::Exactly(n) = sig.operands {
            if op.operands.len() != n {
                return Err(Error::verify(
                    name,
                    format!("expects {n} operands, has {}", op.operands.len()),
                ));
            }
        }
        if let Arity::Exactly(n) = sig.results {
            if op.results.len() != n {
                return Err(Error::verify(
                    name,
                    format!("expects {n} results, has {}", op.results.len()),
                ));
            }
        }
        for (pos, &v) in op.operands.iter().enumerate() {
            if v.is_none() {
                if !sig.optional.contains(&pos) {
                    return Err(Error::verify(name, format!("operand {pos} may not be none")));
                }
                continue;
            }
            if v.index() >= self.m.values.len() || !self.defined.contains(&v) {
                return Err(Error::verify(name, format!("operand %{} used before definition", v.0)));
            }
        }
        if (op.kind() == OpKind::Group) != op.region.is_some() {
            return Err(Error::verify(name, "region present iff op is tpu.Group"));
        }
        if op.kind() == OpKind::Yield && (parent.is_none() || !last) {
            return Err(Error::verify(name, "tpu.Yield must terminate a group body"));
        }
        if op.kind() == OpKind::Input && parent.is_some() {
            return Err(Error::verify(name, "Input inside a group"));
        }
        for (k, a) in &op.attrs {
            if matches!(a, Attribute::LayerGroup(_)) && op.opcode.dialect != Dialect::Tpu {
                return Err(Error::verify(
                    name,
                    format!("layer-group attribute `{k}` on non-tpu op"),
                ));
            }
        }

        if op.kind() == OpKind::Group {
            let body = op.region.as_ref().unwrap();
            let outer = self.defined.clone();
            self.block(body, Some(op))?;
            let yielded = &body.last().unwrap().operands;
            if yielded != &op.results {
                return Err(Error::verify(
                    "tpu.Group",
                    "group results must equal the yielded values",
                ));
            }
            if yielded.iter().any(|v| outer.contains(v)) {
                return Err(Error::verify(
                    "tpu.Group",
                    "group may only yield values defined in its body",
                ));
            }
            // body-local values stay private to the region
            self.defined = outer;
            self.defined.extend(yielded.iter().copied());
            return Ok(());
        }

        for &r in &op.results {
            if r.is_none() || r.index() >= self.m.values.len() {
                return Err(Error::verify(name, "result id out of range"));
            }
            if !self.defined.insert(r) {
                return Err(Error::verify(name, format!("%{} defined twice", r.0)));
            }
            let info = self.m.value(r);
            if info.name.is_empty() {
                return Err(Error::verify(name, "value without location"));
            }
            if !self.names.insert(info.name.as_str()) {
                return Err(Error::verify(name, format!("duplicate location `{}`", info.name)));
            }
            self.ty(&name, &info.ty)?;
        }
        Ok(())
    }

    fn ty(&self, name: &str, ty: &TensorType) -> Result<()> {
        if ty.shape.is_empty() || ty.shape.contains(&0) {
            return Err(Error::verify(name, format!("invalid shape {:?}", ty.shape)));
        }
        match &ty.quant {
            QuantAnnotation::None => {}
            QuantAnnotation::Calibrated { min, max } => {
                if !(min < max) {
                    return Err(Error::verify(name, "calibrated range needs min < max"));
                }
            }
            QuantAnnotation::Uniform(u) => {
                if u.storage != ty.dtype || !(u.scale > 0.0) || u.qmin > u.qmax {
                    return Err(Error::verify(name, "inconsistent uniform quantization"));
                }
                if u.zero_point < u.qmin || u.zero_point > u.qmax {
                    return Err(Error::verify(name, "zero point outside storage range"));
                }
            }
            QuantAnnotation::UniformPerAxis(p) => {
                let dim = ty.shape.get(p.axis).copied();
                if p.storage != ty.dtype
                    || Some(p.scales.len()) != dim
                    || p.zero_points.len() != p.scales.len()
                    || p.scales.iter().any(|s| !(*s > 0.0))
                {
                    return Err(Error::verify(name, "inconsistent per-axis quantization"));
                }
            }
        }
        if let (Some(addr), Some(chip)) = (ty.address, &self.chip) {
            if addr < chip.ddr_start || addr % chip.align_bytes != 0 {
                return Err(Error::verify(name, format!("bad device address {addr}")));
            }
        }
        Ok(())
    }
}

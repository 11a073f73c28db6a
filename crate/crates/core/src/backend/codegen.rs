use std::ops::Range;

use super::group::{group_lmem_operands, group_schedule, GroupSchedule};
use super::isa::{Instruction, Space, TensorRef};
use super::lmem::{backward_slice, pad_top_eff};
use super::program::{IoEntry, TpuProgram};
use crate::error::{Error, Result};
use crate::ir::{ChipConfig, ModuleIR, ModuleState, OpKind, Operation, ValueId};
use crate::kernels::Kernel;
use crate::ops;

fn dims4(m: &ModuleIR, v: ValueId) -> Result<[u32; 4]> {
    let d = m
        .ty(v)
        .nchw()
        .ok_or_else(|| Error::codegen(format!("`{}` has rank > 4", m.name_of(v))))?;
    Ok(d.map(|x| x as u32))
}

fn address(m: &ModuleIR, v: ValueId) -> Result<u64> {
    m.ty(v)
        .address
        .ok_or_else(|| Error::codegen(format!("`{}` has no DDR address", m.name_of(v))))
}

fn ddr_ref(m: &ModuleIR, v: ValueId) -> Result<TensorRef> {
    Ok(TensorRef::full(
        Space::Ddr,
        address(m, v)?,
        m.ty(v).dtype,
        dims4(m, v)?,
        false,
    ))
}

fn io_entry(m: &ModuleIR, v: ValueId) -> Result<IoEntry> {
    let ty = m.ty(v);
    Ok(IoEntry {
        name: m.name_of(v).to_string(),
        dtype: ty.dtype,
        shape: ty.shape.clone(),
        ddr_addr: address(m, v)?,
    })
}

/// Emits the command stream: one compute instruction per global op, and per
/// group and slice step the input loads, the body ops on LMEM and the output
/// store.
pub fn codegen(m: &ModuleIR, chip: &ChipConfig) -> Result<TpuProgram> {
    if m.state != ModuleState::TpuAddressed {
        return Err(Error::WrongState {
            expected: "TPU_ADDRESSED".into(),
            found: m.state.to_string(),
        });
    }
    let mut p = TpuProgram::empty(chip.clone());
    p.commands.clear();
    p.inputs = m.inputs.iter().map(|v| io_entry(m, *v)).collect::<Result<_>>()?;
    p.outputs = m.outputs.iter().map(|v| io_entry(m, *v)).collect::<Result<_>>()?;

    let mut ws: Vec<(u64, ValueId)> = m
        .weight_values()
        .into_iter()
        .map(|v| Ok((address(m, v)?, v)))
        .collect::<Result<_>>()?;
    ws.sort();
    if let Some((first, _)) = ws.first() {
        p.weight_addr = *first;
        for (addr, v) in &ws {
            let name = m.name_of(*v);
            let t = m
                .weights
                .get(name)
                .ok_or_else(|| Error::WeightNotFound(name.to_string()))?;
            let off = (addr - first) as usize;
            if p.weights.len() < off + t.data.len() {
                p.weights.resize(off + t.data.len(), 0);
            }
            p.weights[off..off + t.data.len()].copy_from_slice(&t.data);
        }
    }

    for op in &m.ops {
        match op.kind() {
            OpKind::Input | OpKind::Weight => {}
            OpKind::Group => emit_group(m, op, &mut p.commands)?,
            _ => {
                let kernel = ops::kernel_for(m, op)?;
                let operands = op.present_operands().map(|v| ddr_ref(m, v)).collect::<Result<_>>()?;
                p.commands.push(Instruction::Compute {
                    kernel,
                    operands,
                    result: ddr_ref(m, op.result())?,
                });
            }
        }
    }
    p.commands.push(Instruction::End);
    Ok(p)
}

/// Full-tensor kernel narrowed to one slice step.
fn slice_kernel(k: Kernel, n: usize, input_rows: usize, out: &Range<usize>, elems: usize) -> Kernel {
    let n = n as u32;
    match k {
        Kernel::Conv(mut d) => {
            d.n = n;
            d.ih = input_rows as u32;
            d.oh = out.len() as u32;
            d.pt = pad_top_eff(d.pt as usize, d.sh as usize, out.start) as u32;
            Kernel::Conv(d)
        }
        Kernel::Pool(mut d) => {
            d.n = n;
            d.ih = input_rows as u32;
            d.oh = out.len() as u32;
            d.pt = pad_top_eff(d.pt as usize, d.sh as usize, out.start) as u32;
            Kernel::Pool(d)
        }
        Kernel::Add(mut d) => {
            d.n = n;
            d.h = out.len() as u32;
            Kernel::Add(d)
        }
        Kernel::Relu(mut d) => {
            d.count = elems as u32;
            Kernel::Relu(d)
        }
        Kernel::Cast(mut d) => {
            d.count = elems as u32;
            Kernel::Cast(d)
        }
        other => other,
    }
}

fn lmem_buffer(m: &ModuleIR, s: &GroupSchedule, v: ValueId, n: &Range<usize>, step: usize) -> Result<TensorRef> {
    let (addr, _, eu) = s.place[&v];
    let [_, c, _, w] = dims4(m, v)?;
    let rows = s.rows[&v][step].len() as u32;
    Ok(TensorRef::full(
        Space::Lmem,
        addr,
        m.ty(v).dtype,
        [n.len() as u32, c, rows, w],
        eu,
    ))
}

fn emit_group(m: &ModuleIR, g: &Operation, out: &mut Vec<Instruction>) -> Result<()> {
    let s = group_schedule(m, g)?;
    let body: Vec<&Operation> = g
        .region
        .as_ref()
        .unwrap()
        .iter()
        .filter(|op| op.kind() != OpKind::Yield)
        .collect();
    for nr in &s.n_ranges {
        for k in 0..s.hsecs {
            for (i, &v) in s.inputs.iter().enumerate() {
                let rows = &s.rows[&v][k];
                let mut src = ddr_ref(m, v)?;
                (src.n0, src.nl, src.h0, src.hl) =
                    (nr.start as u32, nr.len() as u32, rows.start as u32, rows.len() as u32);
                out.push(Instruction::DmaLoad {
                    src,
                    dst: lmem_buffer(m, &s, v, nr, k)?,
                    begin_step: i == 0,
                });
            }
            for op in &body {
                let r = s.rows[&op.result()][k].clone();
                let lmem: Vec<(usize, ValueId)> = group_lmem_operands(m, op);
                let mut operands = Vec::new();
                let mut input_rows = r.len();
                for (pos, &u) in op.operands.iter().enumerate() {
                    if u.is_none() {
                        continue;
                    }
                    if lmem.iter().any(|(p, x)| *p == pos && *x == u) {
                        let need = if matches!(op.kind(), OpKind::Conv | OpKind::MaxPool | OpKind::AvgPool) {
                            backward_slice(m, op, r.clone())?
                        } else {
                            r.clone()
                        };
                        let buf = &s.rows[&u][k];
                        let mut view = lmem_buffer(m, &s, u, nr, k)?;
                        view.h0 = (need.start - buf.start) as u32;
                        view.hl = need.len() as u32;
                        if pos == 0 {
                            input_rows = need.len();
                        }
                        operands.push(view);
                    } else {
                        let mut view = ddr_ref(m, u)?;
                        if op.kind() == OpKind::Add && m.ty(u).shape == m.ty(op.result()).shape {
                            (view.n0, view.nl, view.h0, view.hl) =
                                (nr.start as u32, nr.len() as u32, r.start as u32, r.len() as u32);
                        }
                        operands.push(view);
                    }
                }
                let result = lmem_buffer(m, &s, op.result(), nr, k)?;
                let elems = result.view_elems() as usize;
                let kernel = slice_kernel(ops::kernel_for(m, op)?, nr.len(), input_rows, &r, elems);
                out.push(Instruction::Compute {
                    kernel,
                    operands,
                    result,
                });
            }
            let rows = &s.rows[&s.output][k];
            let mut dst = ddr_ref(m, s.output)?;
            (dst.n0, dst.nl, dst.h0, dst.hl) = (nr.start as u32, nr.len() as u32, rows.start as u32, rows.len() as u32);
            out.push(Instruction::DmaStore {
                src: lmem_buffer(m, &s, s.output, nr, k)?,
                dst,
            });
        }
    }
    Ok(())
}

use std::collections::HashSet;

use super::lmem::align_up;
use crate::error::{Error, Result};
use crate::ir::{ChipConfig, ModuleIR, ModuleState, OpKind, ValueId};
use crate::tensor_store::tensor_byte_size;

/// DDR bump allocation: weights first in op order, then every activation
/// visible outside a group, each aligned to `align_bytes`. Values private to
/// a group body get no address.
pub fn assign_addresses(m: &ModuleIR, chip: &ChipConfig) -> Result<ModuleIR> {
    if m.state != ModuleState::TpuLowered {
        return Err(Error::WrongState {
            expected: "TPU_LOWERED".into(),
            found: m.state.to_string(),
        });
    }
    let mut out = m.clone();
    let weights = m.weight_values();
    let mut globals: Vec<ValueId> = Vec::new();
    for op in &m.ops {
        if op.kind() == OpKind::Weight {
            continue;
        }
        globals.extend(op.results.iter().copied());
    }
    let mut seen = HashSet::new();
    let mut at = chip.ddr_start;
    for v in weights.into_iter().chain(globals) {
        if !seen.insert(v) {
            continue;
        }
        let ty = m.ty(v);
        let size = tensor_byte_size(&ty.shape, ty.dtype)? as u64;
        let addr = align_up(at, chip.align_bytes);
        let end = addr + size;
        if end > chip.ddr_end() {
            return Err(Error::OutOfDeviceMemory {
                need: end - chip.ddr_start,
                have: chip.ddr_bytes,
            });
        }
        out.value_mut(v).ty.address = Some(addr);
        at = end;
    }
    out.state = ModuleState::TpuAddressed;
    out.chip = Some(chip.name.clone());
    crate::ir::verify_module(&out)?;
    Ok(out)
}

/// `[addr, addr+size)` of every addressed value, sorted by address.
pub fn ddr_intervals(m: &ModuleIR) -> Vec<(u64, u64, ValueId)> {
    let mut out: Vec<_> = m
        .live_values()
        .into_iter()
        .filter_map(|v| {
            let ty = m.ty(v);
            let size = tensor_byte_size(&ty.shape, ty.dtype).ok()? as u64;
            ty.address.map(|a| (a, a + size, v))
        })
        .collect();
    out.sort();
    out
}

//! Virtual accelerator that executes `.tpm` command streams.
//!
//! DDR is one flat byte array addressed from `ddr_start`. LMEM has
//! `npu_num` lanes of `lmem_bytes` each; channel `c` of an LMEM tensor lives
//! in lane `c % npu_num`. Kernels are the same functions the TPU dialect
//! interpreter uses.

use std::fmt;

use crate::backend::isa::{opcode_name, Instruction, Space, TensorRef};
use crate::backend::{row_bytes, TpuProgram};
use crate::error::{Error, Result};
use crate::ir::ChipConfig;
use crate::tensor_store::{tensor_byte_size, DType, HostTensor, TensorMap};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub pc: usize,
    pub opcode: u8,
    pub addrs: Vec<(Space, u64)>,
    pub bytes: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>5} {:<9}", self.pc, opcode_name(self.opcode))?;
        for (s, a) in &self.addrs {
            write!(f, " {}:{:#x}", s.name(), a)?;
        }
        write!(f, " bytes={}", self.bytes)
    }
}

struct Device<'a> {
    chip: &'a ChipConfig,
    ddr: Vec<u8>,
    lmem: Vec<u8>,
    /// Per-lane LMEM ranges written since the current slice step began.
    fresh: Vec<(u64, u64)>,
    pc: usize,
}

impl Device<'_> {
    fn fault(&self, space: &'static str, addr: u64) -> Error {
        Error::MemoryFault {
            pc: self.pc,
            space,
            addr,
        }
    }

    /// DDR byte offset of `[addr, addr+len)`, bounds-checked.
    fn ddr_span(&self, addr: u64, len: u64) -> Result<usize> {
        let start = addr
            .checked_sub(self.chip.ddr_start)
            .ok_or_else(|| self.fault("DDR", addr))?;
        if start.checked_add(len).is_none_or(|e| e > self.ddr.len() as u64) {
            return Err(self.fault("DDR", addr));
        }
        Ok(start as usize)
    }

    fn check_view(&self, t: &TensorRef) -> Result<()> {
        if t.n0 + t.nl > t.dims[0] || t.h0 + t.hl > t.dims[2] {
            return Err(self.fault(t.space.name(), t.addr));
        }
        Ok(())
    }

    /// Per-lane footprint of an LMEM buffer, bounds-checked.
    fn lmem_extent(&self, t: &TensorRef) -> Result<(u64, u64)> {
        let [n, c, h, w] = t.dims.map(u64::from);
        let cpl = c.div_ceil(self.chip.npu_num);
        let stride = row_bytes(h, w, t.dtype, self.chip, t.eu_align);
        let end = t
            .addr
            .checked_add(n * cpl * stride)
            .ok_or_else(|| self.fault("LMEM", t.addr))?;
        if end > self.chip.lmem_bytes {
            return Err(self.fault("LMEM", end));
        }
        Ok((t.addr, end))
    }

    /// Byte offset of row `(n, c, h)` of `t` in its space.
    fn row_offsets(&self, t: &TensorRef) -> Result<Vec<usize>> {
        self.check_view(t)?;
        let es = t.dtype.byte_size() as u64;
        let [_, c, h, w] = t.dims.map(u64::from);
        let mut out = Vec::with_capacity((t.nl as u64 * c * t.hl as u64) as usize);
        match t.space {
            Space::Ddr => {
                let total = t.dims.iter().map(|d| *d as u64).product::<u64>() * es;
                let base = self.ddr_span(t.addr, total)? as u64;
                for n in t.n0 as u64..(t.n0 + t.nl) as u64 {
                    for ch in 0..c {
                        for y in t.h0 as u64..(t.h0 + t.hl) as u64 {
                            out.push((base + ((n * c + ch) * h + y) * w * es) as usize);
                        }
                    }
                }
            }
            Space::Lmem => {
                self.lmem_extent(t)?;
                let npu = self.chip.npu_num;
                let cpl = c.div_ceil(npu);
                let stride = row_bytes(h, w, t.dtype, self.chip, t.eu_align);
                for n in t.n0 as u64..(t.n0 + t.nl) as u64 {
                    for ch in 0..c {
                        let lane = ch % npu;
                        let slot = ch / npu;
                        for y in t.h0 as u64..(t.h0 + t.hl) as u64 {
                            let off = t.addr + (n * cpl + slot) * stride + y * w * es;
                            out.push((lane * self.chip.lmem_bytes + off) as usize);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn read(&self, t: &TensorRef) -> Result<Vec<u8>> {
        if t.space == Space::Lmem {
            let (a, b) = self.lmem_extent(t)?;
            if !covered(&self.fresh, a, b) {
                return Err(Error::StaleRead { pc: self.pc });
            }
        }
        let row = (t.dims[3] as usize) * t.dtype.byte_size();
        let mem = match t.space {
            Space::Ddr => &self.ddr,
            Space::Lmem => &self.lmem,
        };
        let mut out = Vec::with_capacity(t.view_bytes() as usize);
        for off in self.row_offsets(t)? {
            out.extend_from_slice(&mem[off..off + row]);
        }
        Ok(out)
    }

    fn write(&mut self, t: &TensorRef, data: &[u8]) -> Result<()> {
        if data.len() as u64 != t.view_bytes() {
            return Err(Error::BadProgram(format!(
                "pc {}: {} bytes produced for a {}-byte destination",
                self.pc,
                data.len(),
                t.view_bytes()
            )));
        }
        let row = (t.dims[3] as usize) * t.dtype.byte_size();
        let offs = self.row_offsets(t)?;
        if t.space == Space::Lmem {
            let span = self.lmem_extent(t)?;
            self.fresh.push(span);
        }
        let mem = match t.space {
            Space::Ddr => &mut self.ddr,
            Space::Lmem => &mut self.lmem,
        };
        for (i, off) in offs.into_iter().enumerate() {
            mem[off..off + row].copy_from_slice(&data[i * row..(i + 1) * row]);
        }
        Ok(())
    }
}

/// `[a, b)` lies inside the union of `spans`.
fn covered(spans: &[(u64, u64)], a: u64, b: u64) -> bool {
    let mut s: Vec<(u64, u64)> = spans.iter().copied().filter(|(x, y)| *y > a && *x < b).collect();
    s.sort();
    let mut at = a;
    for (x, y) in s {
        if x > at {
            return false;
        }
        at = at.max(y);
        if at >= b {
            return true;
        }
    }
    at >= b
}

fn run(p: &TpuProgram, inputs: &TensorMap, mut log: Option<&mut Vec<TraceRecord>>) -> Result<TensorMap> {
    let chip = &p.chip;
    let mut dev = Device {
        chip,
        ddr: vec![0; chip.ddr_bytes as usize],
        lmem: vec![0; (chip.lmem_bytes * chip.npu_num) as usize],
        fresh: Vec::new(),
        pc: 0,
    };
    let off = dev.ddr_span(p.weight_addr, p.weights.len() as u64)?;
    dev.ddr[off..off + p.weights.len()].copy_from_slice(&p.weights);
    for e in &p.inputs {
        let t = inputs.get(&e.name).ok_or_else(|| Error::MissingInput(e.name.clone()))?;
        if t.dtype != e.dtype || t.num_elements() != e.shape.iter().product::<usize>() {
            return Err(Error::BadInput {
                name: e.name.clone(),
                reason: format!("expected {} {:?}, got {} {:?}", e.dtype, e.shape, t.dtype, t.shape),
            });
        }
        let off = dev.ddr_span(e.ddr_addr, t.data.len() as u64)?;
        dev.ddr[off..off + t.data.len()].copy_from_slice(&t.data);
    }

    let mut ended = false;
    for (pc, ins) in p.commands.iter().enumerate() {
        dev.pc = pc;
        let (addrs, bytes) = match ins {
            Instruction::DmaLoad { src, dst, begin_step } => {
                if *begin_step {
                    dev.fresh.clear();
                }
                let data = dev.read(src)?;
                dev.write(dst, &data)?;
                (vec![(src.space, src.addr), (dst.space, dst.addr)], data.len() as u64)
            }
            Instruction::DmaStore { src, dst } => {
                let data = dev.read(src)?;
                dev.write(dst, &data)?;
                (vec![(src.space, src.addr), (dst.space, dst.addr)], data.len() as u64)
            }
            Instruction::Compute {
                kernel,
                operands,
                result,
            } => {
                let args = operands.iter().map(|t| dev.read(t)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[u8]> = args.iter().map(|a| a.as_slice()).collect();
                let y = kernel.run(&refs)?;
                dev.write(result, &y)?;
                let mut addrs: Vec<(Space, u64)> = operands.iter().map(|t| (t.space, t.addr)).collect();
                addrs.push((result.space, result.addr));
                (addrs, y.len() as u64)
            }
            Instruction::End => {
                ended = true;
                (vec![], 0)
            }
            Instruction::Unknown { .. } => return Err(Error::IllegalInstruction { pc }),
        };
        if let Some(l) = log.as_deref_mut() {
            l.push(TraceRecord {
                pc,
                opcode: ins.opcode(),
                addrs,
                bytes,
            });
        }
        if ended {
            break;
        }
    }
    if !ended {
        return Err(Error::IllegalInstruction { pc: p.commands.len() });
    }

    let mut out = TensorMap::new();
    for e in &p.outputs {
        let len = tensor_byte_size(&e.shape, e.dtype)?;
        let off = dev.ddr_span(e.ddr_addr, len as u64)?;
        let t = HostTensor::new(
            e.name.clone(),
            e.shape.clone(),
            e.dtype,
            dev.ddr[off..off + len].to_vec(),
        )?;
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

/// Executes `p` and returns its outputs by name.
pub fn run_program(p: &TpuProgram, inputs: &TensorMap) -> Result<TensorMap> {
    run(p, inputs, None)
}

/// Like [`run_program`], also returning one record per executed instruction.
pub fn trace(p: &TpuProgram, inputs: &TensorMap) -> Result<(TensorMap, Vec<TraceRecord>)> {
    let mut log = Vec::new();
    let out = run(p, inputs, Some(&mut log))?;
    Ok((out, log))
}

/// F32 view of a simulator output.
pub fn output_f32(t: &HostTensor) -> Result<Vec<f32>> {
    match t.dtype {
        DType::F32 | DType::BF16 | DType::F16 => t.to_f32_vec(),
        d => Err(Error::UnsupportedCast {
            from: d.to_string(),
            to: "f32".into(),
        }),
    }
}

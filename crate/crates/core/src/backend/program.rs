//! The `.tpm` program file.
//!
//! ```text
//! "TPMD" | version u32 = 1 | chip name [16] | nsections u32
//! nsections x { kind u32, offset u64, size u64 }
//! sections: INPUTS, OUTPUTS, WEIGHTS, COMMANDS, CHIP
//! ```
//!
//! IO entries are `name [64] | dtype u8 | rank u8 | dims u32[8] | ddr_addr u64`.
//! All integers are little-endian.

use std::path::Path;

use super::isa::{decode_instruction, encode_instruction, Instruction, Reader, Wire};
use crate::error::{Error, Result};
use crate::ir::{ChipConfig, Mode};
use crate::tensor_store::DType;

pub const MAGIC: &[u8; 4] = b"TPMD";
pub const VERSION: u32 = 1;

const SEC_INPUTS: u32 = 1;
const SEC_OUTPUTS: u32 = 2;
const SEC_WEIGHTS: u32 = 3;
const SEC_COMMANDS: u32 = 4;
const SEC_CHIP: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub ddr_addr: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpuProgram {
    pub chip: ChipConfig,
    pub inputs: Vec<IoEntry>,
    pub outputs: Vec<IoEntry>,
    /// DDR address of the first weight byte.
    pub weight_addr: u64,
    pub weights: Vec<u8>,
    pub commands: Vec<Instruction>,
}

impl TpuProgram {
    pub fn empty(chip: ChipConfig) -> Self {
        TpuProgram {
            weight_addr: chip.ddr_start,
            chip,
            inputs: Vec::new(),
            outputs: Vec::new(),
            weights: Vec::new(),
            commands: vec![Instruction::End],
        }
    }
}

fn fixed_name(s: &str, n: usize) -> Result<Vec<u8>> {
    if s.len() > n {
        return Err(Error::BadProgram(format!("name `{s}` longer than {n} bytes")));
    }
    let mut b = s.as_bytes().to_vec();
    b.resize(n, 0);
    Ok(b)
}

fn read_name(b: &[u8]) -> Result<String> {
    let end = b.iter().position(|c| *c == 0).unwrap_or(b.len());
    if b[end..].iter().any(|c| *c != 0) {
        return Err(Error::BadProgram("name field has bytes after its terminator".into()));
    }
    String::from_utf8(b[..end].to_vec()).map_err(|_| Error::BadProgram("name is not UTF-8".into()))
}

fn put_io(entries: &[IoEntry], w: &mut Vec<u8>) -> Result<()> {
    (entries.len() as u32).put(w);
    for e in entries {
        w.extend_from_slice(&fixed_name(&e.name, 64)?);
        e.dtype.put(w);
        if e.shape.len() > 8 {
            return Err(Error::BadProgram(format!(
                "`{}` has rank {} > 8",
                e.name,
                e.shape.len()
            )));
        }
        (e.shape.len() as u8).put(w);
        for i in 0..8 {
            (e.shape.get(i).copied().unwrap_or(0) as u32).put(w);
        }
        e.ddr_addr.put(w);
    }
    Ok(())
}

fn get_io(r: &mut Reader) -> Result<Vec<IoEntry>> {
    let n = u32::get(r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name = read_name(r.take(64)?)?;
        let dtype = DType::get(r)?;
        let rank = u8::get(r)? as usize;
        if rank > 8 {
            return Err(Error::BadProgram(format!("rank {rank} > 8")));
        }
        let dims: Vec<u32> = (0..8).map(|_| u32::get(r)).collect::<Result<_>>()?;
        if dims[rank..].iter().any(|d| *d != 0) {
            return Err(Error::BadProgram("unused dims must be zero".into()));
        }
        out.push(IoEntry {
            name,
            dtype,
            shape: dims[..rank].iter().map(|d| *d as usize).collect(),
            ddr_addr: u64::get(r)?,
        });
    }
    Ok(out)
}

fn mode_code(m: Mode) -> u8 {
    Mode::ALL.iter().position(|x| *x == m).unwrap() as u8
}

fn put_chip(c: &ChipConfig, w: &mut Vec<u8>) {
    for v in [
        c.lmem_bytes,
        c.npu_num,
        c.eu_bytes,
        c.ddr_start,
        c.ddr_bytes,
        c.align_bytes,
    ] {
        v.put(w);
    }
    c.modes.iter().map(|m| mode_code(*m)).collect::<Vec<u8>>().put(w);
}

fn get_chip(name: String, r: &mut Reader) -> Result<ChipConfig> {
    let mut f = [0u64; 6];
    for v in &mut f {
        *v = u64::get(r)?;
    }
    let codes: Vec<u8> = Wire::get(r)?;
    let modes = codes
        .iter()
        .map(|c| Mode::ALL.get(*c as usize).copied())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::BadProgram("bad mode code".into()))?;
    let chip = ChipConfig {
        name,
        lmem_bytes: f[0],
        npu_num: f[1],
        eu_bytes: f[2],
        ddr_start: f[3],
        ddr_bytes: f[4],
        align_bytes: f[5],
        modes,
    };
    chip.validate().map_err(|e| Error::BadProgram(e.to_string()))?;
    Ok(chip)
}

pub fn serialize_program(p: &TpuProgram) -> Result<Vec<u8>> {
    let mut sections: Vec<(u32, Vec<u8>)> = Vec::new();
    let mut s = Vec::new();
    put_io(&p.inputs, &mut s)?;
    sections.push((SEC_INPUTS, s));
    let mut s = Vec::new();
    put_io(&p.outputs, &mut s)?;
    sections.push((SEC_OUTPUTS, s));
    let mut s = Vec::new();
    p.weight_addr.put(&mut s);
    (p.weights.len() as u64).put(&mut s);
    s.extend_from_slice(&p.weights);
    sections.push((SEC_WEIGHTS, s));
    let mut s = Vec::new();
    (p.commands.len() as u32).put(&mut s);
    for ins in &p.commands {
        encode_instruction(ins, &mut s);
    }
    sections.push((SEC_COMMANDS, s));
    let mut s = Vec::new();
    put_chip(&p.chip, &mut s);
    sections.push((SEC_CHIP, s));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    VERSION.put(&mut out);
    out.extend_from_slice(&fixed_name(&p.chip.name, 16)?);
    (sections.len() as u32).put(&mut out);
    let table_end = out.len() + sections.len() * 20;
    let mut offset = table_end as u64;
    for (kind, body) in &sections {
        kind.put(&mut out);
        offset.put(&mut out);
        (body.len() as u64).put(&mut out);
        offset += body.len() as u64;
    }
    for (_, body) in sections {
        out.extend_from_slice(&body);
    }
    Ok(out)
}

pub fn parse_program(bytes: &[u8]) -> Result<TpuProgram> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::BadProgram("missing TPMD magic".into()));
    }
    let version = u32::get(&mut r)?;
    if version != VERSION {
        return Err(Error::BadProgram(format!("unsupported version {version}")));
    }
    let chip_name = read_name(r.take(16)?)?;
    let nsec = u32::get(&mut r)?;
    let mut table = Vec::new();
    let mut expect = r.pos() as u64 + nsec as u64 * 20;
    for _ in 0..nsec {
        let (kind, off, size) = (u32::get(&mut r)?, u64::get(&mut r)?, u64::get(&mut r)?);
        if off != expect {
            return Err(Error::BadProgram(format!("section {kind} at {off}, expected {expect}")));
        }
        expect = off
            .checked_add(size)
            .filter(|e| *e <= bytes.len() as u64)
            .ok_or_else(|| Error::BadProgram(format!("section {kind} overruns the file")))?;
        table.push((kind, off as usize, size as usize));
    }
    if expect != bytes.len() as u64 {
        return Err(Error::BadProgram("trailing bytes after last section".into()));
    }
    let kinds: Vec<u32> = table.iter().map(|t| t.0).collect();
    if kinds != [SEC_INPUTS, SEC_OUTPUTS, SEC_WEIGHTS, SEC_COMMANDS, SEC_CHIP] {
        return Err(Error::BadProgram(format!("unexpected section layout {kinds:?}")));
    }
    let body = |i: usize| Reader::new(&bytes[table[i].1..table[i].1 + table[i].2]);

    let mut s = body(0);
    let inputs = get_io(&mut s)?;
    ensure_done(&s, "INPUTS")?;
    let mut s = body(1);
    let outputs = get_io(&mut s)?;
    ensure_done(&s, "OUTPUTS")?;
    let mut s = body(2);
    let weight_addr = u64::get(&mut s)?;
    let wlen = u64::get(&mut s)? as usize;
    let weights = s.take(wlen)?.to_vec();
    ensure_done(&s, "WEIGHTS")?;
    let mut s = body(3);
    let n = u32::get(&mut s)?;
    let mut commands = Vec::new();
    for _ in 0..n {
        commands.push(decode_instruction(&mut s)?);
    }
    ensure_done(&s, "COMMANDS")?;
    let mut s = body(4);
    let chip = get_chip(chip_name, &mut s)?;
    ensure_done(&s, "CHIP")?;
    Ok(TpuProgram {
        chip,
        inputs,
        outputs,
        weight_addr,
        weights,
        commands,
    })
}

fn ensure_done(r: &Reader, what: &str) -> Result<()> {
    if r.done() {
        Ok(())
    } else {
        Err(Error::BadProgram(format!("{what} section has trailing bytes")))
    }
}

pub fn save_program(p: &TpuProgram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_program(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_program(path: impl AsRef<Path>) -> Result<TpuProgram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_program(&bytes)
}

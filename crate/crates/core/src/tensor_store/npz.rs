//! NPZ archives: a ZIP container of STORED `.npy` members.
//!
//! Only the subset numpy's `savez` produces is understood, including the
//! zip64 extra fields it emits for local headers. DEFLATE members are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::{npy, HostTensor};

pub type TensorMap = BTreeMap<String, HostTensor>;

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;
const STORED: u16 = 0;
// 1980-01-01 00:00, the ZIP epoch; fixed so archives are reproducible
const DOS_DATE: u16 = (1 << 5) | 1;
const DOS_TIME: u16 = 0;

fn bad(reason: impl Into<String>) -> Error {
    Error::BadArchive(reason.into())
}

pub fn npz_read(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    npz_read_bytes(&bytes)
}

pub fn npz_write(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, npz_write_bytes(tensors)).map_err(|e| Error::io(path, e))
}

pub fn npz_write_bytes(tensors: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    let mut central = Vec::new();
    for (name, tensor) in tensors {
        let member = format!("{name}.npy");
        let payload = npy::encode(tensor);
        let crc = crc32fast::hash(&payload);
        let offset = out.len() as u32;

        put32(&mut out, LOCAL_SIG);
        put16(&mut out, 20);
        put16(&mut out, 0);
        put16(&mut out, STORED);
        put16(&mut out, DOS_TIME);
        put16(&mut out, DOS_DATE);
        put32(&mut out, crc);
        put32(&mut out, payload.len() as u32);
        put32(&mut out, payload.len() as u32);
        put16(&mut out, member.len() as u16);
        put16(&mut out, 0);
        out.extend_from_slice(member.as_bytes());
        out.extend_from_slice(&payload);

        put32(&mut central, CENTRAL_SIG);
        put16(&mut central, 20);
        put16(&mut central, 20);
        put16(&mut central, 0);
        put16(&mut central, STORED);
        put16(&mut central, DOS_TIME);
        put16(&mut central, DOS_DATE);
        put32(&mut central, crc);
        put32(&mut central, payload.len() as u32);
        put32(&mut central, payload.len() as u32);
        put16(&mut central, member.len() as u16);
        put16(&mut central, 0);
        put16(&mut central, 0);
        put16(&mut central, 0);
        put16(&mut central, 0);
        put32(&mut central, 0);
        put32(&mut central, offset);
        central.extend_from_slice(member.as_bytes());
    }
    let cd_offset = out.len() as u32;
    let cd_size = central.len() as u32;
    out.extend_from_slice(&central);
    put32(&mut out, EOCD_SIG);
    put16(&mut out, 0);
    put16(&mut out, 0);
    put16(&mut out, tensors.len() as u16);
    put16(&mut out, tensors.len() as u16);
    put32(&mut out, cd_size);
    put32(&mut out, cd_offset);
    put16(&mut out, 0);
    out
}

pub fn npz_read_bytes(bytes: &[u8]) -> Result<TensorMap> {
    let eocd = find_eocd(bytes)?;
    let mut r = Cursor::at(bytes, eocd + 10);
    let entries = r.u16()? as usize;
    let _cd_size = r.u32()?;
    let cd_offset = r.u32()? as usize;
    if entries == 0xFFFF || cd_offset == 0xFFFF_FFFF {
        return Err(bad("zip64 central directory is not supported"));
    }

    let mut map = TensorMap::new();
    let mut r = Cursor::at(bytes, cd_offset);
    for _ in 0..entries {
        if r.u32()? != CENTRAL_SIG {
            return Err(bad("bad central directory signature"));
        }
        r.skip(6)?;
        let method = r.u16()?;
        r.skip(4)?;
        let crc = r.u32()?;
        let mut comp_size = r.u32()? as u64;
        let mut size = r.u32()? as u64;
        let name_len = r.u16()? as usize;
        let extra_len = r.u16()? as usize;
        let comment_len = r.u16()? as usize;
        r.skip(8)?;
        let mut local_offset = r.u32()? as u64;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let extra = r.take(extra_len)?;
        r.skip(comment_len)?;

        apply_zip64_extra(extra, &mut size, &mut comp_size, &mut local_offset)?;

        if method != STORED {
            return Err(Error::UnsupportedCompression(name));
        }
        if comp_size != size {
            return Err(bad(format!("member `{name}` sizes disagree")));
        }

        let mut lr = Cursor::at(bytes, local_offset as usize);
        if lr.u32()? != LOCAL_SIG {
            return Err(bad(format!("member `{name}`: bad local header")));
        }
        lr.skip(22)?;
        let lname = lr.u16()? as usize;
        let lextra = lr.u16()? as usize;
        lr.skip(lname + lextra)?;
        let payload = lr.take(size as usize)?;
        if crc32fast::hash(payload) != crc {
            return Err(bad(format!("member `{name}`: CRC mismatch")));
        }
        if !name.ends_with(".npy") {
            return Err(bad(format!("member `{name}` is not an .npy file")));
        }
        let tensor = npy::decode(&name, payload)?;
        map.insert(tensor.name.clone(), tensor);
    }
    Ok(map)
}

fn apply_zip64_extra(extra: &[u8], size: &mut u64, comp: &mut u64, offset: &mut u64) -> Result<()> {
    let mut r = Cursor::at(extra, 0);
    while r.remaining() >= 4 {
        let id = r.u16()?;
        let len = r.u16()? as usize;
        let body = r.take(len)?;
        if id != 0x0001 {
            continue;
        }
        let mut b = Cursor::at(body, 0);
        for field in [size, comp, offset] {
            if *field == 0xFFFF_FFFF {
                *field = b.u64()?;
            }
        }
        return Ok(());
    }
    Ok(())
}

fn find_eocd(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 22 {
        return Err(bad("file too short for a ZIP archive"));
    }
    let lowest = bytes.len().saturating_sub(22 + 0xFFFF);
    (lowest..=bytes.len() - 22)
        .rev()
        .find(|&i| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) == EOCD_SIG)
        .ok_or_else(|| bad("end of central directory not found"))
}

fn put16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at(buf: &'a [u8], pos: usize) -> Self {
        Cursor { buf, pos }
    }

    fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("unexpected end of archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

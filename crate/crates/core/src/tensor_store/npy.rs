//! NPY v1.0 encoding of a single tensor.

use crate::error::{Error, Result};

use super::{DType, HostTensor};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub descr: String,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Offset of the first payload byte from the start of the member.
    pub data_offset: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::BadArchive(reason.into())
}

pub(crate) fn descr_for(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "<f4",
        DType::F16 => "<f2",
        // no numpy code for bfloat16; raw bits travel as uint16
        DType::BF16 => "<u2",
        DType::I8 => "|i1",
        DType::U8 => "|u1",
        DType::I32 => "<i4",
    }
}

pub(crate) fn dtype_for(descr: &str) -> Result<DType> {
    Ok(match descr {
        "<f4" => DType::F32,
        "<f2" => DType::F16,
        "<u2" => DType::BF16,
        "|i1" | "<i1" => DType::I8,
        "|u1" | "<u1" => DType::U8,
        "<i4" => DType::I32,
        other => return Err(Error::UnsupportedDType(other.to_string())),
    })
}

/// Parses the preamble and header dict of an NPY v1.0 stream.
pub fn parse_npy_header(bytes: &[u8]) -> Result<NpyHeader> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("missing NPY magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(bad(format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = 10 + header_len;
    if bytes.len() < data_offset {
        return Err(bad("truncated NPY header"));
    }
    let text = std::str::from_utf8(&bytes[10..data_offset]).map_err(|_| bad("NPY header is not ASCII"))?;
    let mut p = DictParser {
        s: text.as_bytes(),
        pos: 0,
    };
    let (descr, fortran_order, shape) = p.parse_dict()?;
    Ok(NpyHeader {
        descr,
        fortran_order,
        shape,
        data_offset,
    })
}

pub(crate) fn decode(member: &str, bytes: &[u8]) -> Result<HostTensor> {
    let header = parse_npy_header(bytes)?;
    if header.fortran_order {
        return Err(Error::UnsupportedLayout(member.to_string()));
    }
    let dtype = dtype_for(&header.descr)?;
    let payload = bytes[header.data_offset..].to_vec();
    let name = member.strip_suffix(".npy").unwrap_or(member);
    HostTensor::new(name, header.shape, dtype, payload)
}

pub(crate) fn encode(t: &HostTensor) -> Vec<u8> {
    let shape = match t.shape.as_slice() {
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        descr_for(t.dtype),
        shape
    );
    let unpadded = 10 + dict.len() + 1;
    let padded = unpadded.div_ceil(ALIGN) * ALIGN;
    dict.extend(std::iter::repeat_n(' ', padded - unpadded));
    dict.push('\n');

    let mut out = Vec::with_capacity(padded + t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend_from_slice(&t.data);
    out
}

/// Just enough of a Python literal parser for the NPY header dict.
struct DictParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl DictParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(bad(format!("NPY header: expected `{}` at {}", c as char, self.pos)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = self.peek().ok_or_else(|| bad("NPY header: unexpected end"))?;
        if quote != b'\'' && quote != b'"' {
            return Err(bad("NPY header: expected string"));
        }
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(bad("NPY header: unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn word(&mut self) -> &[u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.s[start..self.pos]
    }

    fn boolean(&mut self) -> Result<bool> {
        match self.word() {
            b"True" => Ok(true),
            b"False" => Ok(false),
            _ => Err(bad("NPY header: expected True/False")),
        }
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(b',') if !dims.is_empty() => self.pos += 1,
                Some(c) if c.is_ascii_digit() => {
                    let w = self.word();
                    let d = std::str::from_utf8(w)
                        .ok()
                        .and_then(|w| w.parse::<usize>().ok())
                        .ok_or_else(|| bad("NPY header: bad dimension"))?;
                    dims.push(d);
                }
                _ => return Err(bad("NPY header: bad shape tuple")),
            }
        }
    }

    fn parse_dict(&mut self) -> Result<(String, bool, Vec<usize>)> {
        self.expect(b'{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            match self.peek() {
                Some(b'}') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') => {
                    self.pos += 1;
                    continue;
                }
                _ => {}
            }
            let key = self.string()?;
            self.expect(b':')?;
            match key.as_str() {
                "descr" => descr = Some(self.string()?),
                "fortran_order" => fortran = Some(self.boolean()?),
                "shape" => shape = Some(self.shape()?),
                other => return Err(bad(format!("NPY header: unknown key `{other}`"))),
            }
        }
        match (descr, fortran, shape) {
            (Some(d), Some(f), Some(s)) => Ok((d, f, s)),
            _ => Err(bad("NPY header: missing key")),
        }
    }
}

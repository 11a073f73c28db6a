//! Dense host tensors and NPZ archives.
//!
//! Every tensor that crosses a file boundary (weights, calibration samples,
//! inference dumps) is a [`HostTensor`]: a name, a static shape, a dtype and
//! a little-endian row-major byte buffer.

mod npy;
mod npz;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

pub use npy::{parse_npy_header, NpyHeader};
pub use npz::{npz_read, npz_read_bytes, npz_write, npz_write_bytes, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
    I8,
    U8,
    I32,
}

impl DType {
    pub const ALL: [DType; 6] = [DType::F32, DType::F16, DType::BF16, DType::I8, DType::U8, DType::I32];

    pub fn byte_size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 | DType::BF16 => 2,
            DType::I8 | DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16 | DType::BF16)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::BF16 => "bf16",
            DType::I8 => "i8",
            DType::U8 => "u8",
            DType::I32 => "i32",
        }
    }

    /// Stable numeric code used by the program file format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::BF16 => 2,
            DType::I8 => 3,
            DType::U8 => 4,
            DType::I32 => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.code() == code)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DType::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown dtype `{s}`"))
    }
}

/// `product(shape) * byte_size(dtype)`, checked.
pub fn tensor_byte_size(shape: &[usize], dtype: DType) -> Result<usize> {
    shape
        .iter()
        .try_fold(dtype.byte_size(), |acc, &d| acc.checked_mul(d))
        .ok_or(Error::SizeOverflow)
}

pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq, Eq)]
pub struct HostTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<u8>,
}

impl fmt::Debug for HostTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostTensor")
            .field("name", &self.name)
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl HostTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: DType, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadTensor {
                name,
                reason: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let expected = tensor_byte_size(&shape, dtype)?;
        if data.len() != expected {
            return Err(Error::BadTensor {
                name,
                reason: format!("{} data bytes, shape needs {expected}", data.len()),
            });
        }
        Ok(HostTensor {
            name,
            shape,
            dtype,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let bytes = tensor_byte_size(&shape, dtype)?;
        HostTensor::new(name, shape, dtype, vec![0; bytes])
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        HostTensor::new(name, shape, DType::F32, numeric::f32_to_bytes(values))
    }

    pub fn from_i8(name: impl Into<String>, shape: Vec<usize>, values: &[i8]) -> Result<Self> {
        HostTensor::new(name, shape, DType::I8, values.iter().map(|&v| v as u8).collect())
    }

    pub fn from_i32(name: impl Into<String>, shape: Vec<usize>, values: &[i32]) -> Result<Self> {
        HostTensor::new(name, shape, DType::I32, numeric::i32_to_bytes(values))
    }

    /// Raw 16-bit patterns, tagged with `dtype` (F16 or BF16).
    pub fn from_u16_bits(name: impl Into<String>, shape: Vec<usize>, dtype: DType, bits: &[u16]) -> Result<Self> {
        HostTensor::new(name, shape, dtype, numeric::u16_to_bytes(bits))
    }

    pub fn num_elements(&self) -> usize {
        num_elements(&self.shape)
    }

    pub fn byte_size(&self) -> usize {
        self.data.len()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Widen to F32. Fails for integer dtypes, which need quantization
    /// parameters to be interpreted.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => Ok(numeric::bytes_to_f32(&self.data)),
            DType::BF16 => Ok(numeric::bytes_to_u16(&self.data)
                .into_iter()
                .map(numeric::bf16_to_f32)
                .collect()),
            DType::F16 => Ok(numeric::bytes_to_u16(&self.data)
                .into_iter()
                .map(numeric::f16_to_f32)
                .collect()),
            other => Err(Error::BadTensor {
                name: self.name.clone(),
                reason: format!("cannot read {other} tensor as f32 without quantization parameters"),
            }),
        }
    }

    pub fn as_i8_vec(&self) -> Vec<i8> {
        self.data.iter().map(|&b| b as i8).collect()
    }

    pub fn as_i32_vec(&self) -> Vec<i32> {
        numeric::bytes_to_i32(&self.data)
    }
}

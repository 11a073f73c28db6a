//! SSA IR shared by the TOP and TPU dialects.

mod attr;
mod chip;
mod module;
mod opcode;
mod text;
mod types;
mod verify;

use std::path::Path;

pub use attr::{AttrMap, AttrMapExt, Attribute, LayerGroupInfo};
pub use chip::ChipConfig;
pub use module::{Mode, ModuleIR, ModuleState, Operation};
pub use opcode::{Arity, Dialect, OpKind, Opcode, Signature, TOP_KINDS, TPU_KINDS};
pub use text::{fmt_attrs, fmt_type, parse_module, serialize_module};
pub use types::{PerAxisQuant, QuantAnnotation, TensorType, UniformQuant, ValueId, ValueInfo};
pub use verify::verify_module;

use crate::error::{Error, Result};
use crate::tensor_store::{npz_read, npz_write};

/// Writes `path` and the weight archive next to it (`weight_file` is
/// resolved relative to the module file).
pub fn save_module(m: &ModuleIR, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    verify_module(m)?;
    std::fs::write(path, serialize_module(m)).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    npz_write(dir.join(&m.weight_file), &m.weights)
}

pub fn load_module(path: impl AsRef<Path>) -> Result<ModuleIR> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_module(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let wpath = dir.join(&m.weight_file);
    if wpath.exists() {
        m.weights = npz_read(&wpath)?;
    } else if !m.weight_values().is_empty() {
        return Err(Error::io(&wpath, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(m)
}

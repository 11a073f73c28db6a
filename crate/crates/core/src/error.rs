use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the compiler, the dialect runners and the simulator can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // tensor store
    #[error("tensor size overflows address arithmetic")]
    SizeOverflow,
    #[error("npz member `{0}` is compressed; only STORED members are supported")]
    UnsupportedCompression(String),
    #[error("npy member `{0}` is fortran-ordered")]
    UnsupportedLayout(String),
    #[error("unsupported npy dtype descr `{0}`")]
    UnsupportedDType(String),
    #[error("malformed archive: {0}")]
    BadArchive(String),
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },

    // ir
    #[error("verify error at `{op}`: {reason}")]
    Verify { op: String, reason: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    // weights and inference
    #[error("weight `{0}` not found in weight file")]
    WeightNotFound(String),
    #[error("weight `{name}` has shape {found:?}, declared {declared:?}")]
    WeightShapeMismatch {
        name: String,
        declared: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight `{0}` already exists")]
    DuplicateWeight(String),
    #[error("host allocation of {0} bytes failed")]
    OutOfHostMemory(usize),
    #[error("missing network input `{0}`")]
    MissingInput(String),
    #[error("weight `{0}` contains non-finite values")]
    InvalidWeight(String),
    #[error("module is in state {found}, expected {expected}")]
    WrongState { expected: String, found: String },

    // frontend
    #[error("unsupported op `{op_type}` at node `{name}`")]
    UnsupportedOp { name: String, op_type: String },
    #[error("node `{name}`: unsupported rank {rank}")]
    UnsupportedRank { name: String, rank: usize },
    #[error("node `{name}`: {reason}")]
    UnsupportedAttr { name: String, reason: String },
    #[error("invalid interchange graph: {0}")]
    InvalidGraph(String),

    // calibration
    #[error("non-finite activation in `{0}`")]
    NonFiniteActivation(String),
    #[error("calibration table line {line}: {reason}")]
    CalibParse { line: usize, reason: String },
    #[error("no calibration entry for `{0}`")]
    MissingCalibration(String),
    #[error("calibration needs at least one sample")]
    NoSamples,

    // lowering
    #[error("INT8 lowering requires a calibrated module")]
    NotCalibrated,
    #[error("mode {mode} is not supported by chip {chip}")]
    UnsupportedMode { mode: String, chip: String },
    #[error("unknown chip `{0}`")]
    UnknownChip(String),
    #[error("requantization shift {0} out of range [0, 62]")]
    RequantOverflow(i64),

    // tpu dialect
    #[error("unsupported cast {from} -> {to}")]
    UnsupportedCast { from: String, to: String },
    #[error("int32 accumulator overflow")]
    AccumOverflow,

    // backend
    #[error("empty slice")]
    EmptySlice,
    #[error("device memory exhausted: need {need} bytes, have {have}")]
    OutOfDeviceMemory { need: u64, have: u64 },
    #[error("codegen: {0}")]
    Codegen(String),
    #[error("bad program file: {0}")]
    BadProgram(String),

    // simulator
    #[error("memory fault at pc {pc}: {space} address {addr:#x}")]
    MemoryFault { pc: usize, space: &'static str, addr: u64 },
    #[error("illegal instruction at pc {pc}")]
    IllegalInstruction { pc: usize },
    #[error("pc {pc} read LMEM bytes not written in the current slice step")]
    StaleRead { pc: usize },
    #[error("input `{name}`: {reason}")]
    BadInput { name: String, reason: String },

    // compare
    #[error("length mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no common tensors to compare")]
    NothingToCompare,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn verify(op: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Verify {
            op: op.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn codegen(msg: impl Into<String>) -> Self {
        Error::Codegen(msg.into())
    }
}

//! C ABI over the tpuc compiler and simulator.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Every fallible call returns a [`TpucStatus`]; on
//! failure [`tpuc_last_error`] describes the most recent error on the
//! calling thread. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tpuc::backend::{load_program, save_program, TpuProgram};
use tpuc::frontend::import_files;
use tpuc::ir::{load_module, save_module, ChipConfig, Mode, ModuleIR};
use tpuc::pipeline::{deploy, DeployOptions};
use tpuc::sim::{output_f32, run_program};
use tpuc::tensor_store::{npz_read, npz_write, HostTensor, TensorMap};
use tpuc::transforms::{calibrate, read_calib_table, write_calib_table, CalibMethod};
use tpuc::verify::{cosine_similarity, euclidean_similarity};
use tpuc::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpucStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, unknown mode or chip name, short buffer.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed graph, module text, archive, calibration table or program.
    Parse = 3,
    /// The module failed verification or is in the wrong state.
    Verify = 4,
    /// Op, attribute, dtype, cast or mode the compiler does not handle.
    Unsupported = 5,
    /// Weight or input missing, mis-shaped or non-finite.
    Data = 6,
    /// Device memory exhausted or a codegen failure.
    Compile = 7,
    /// The simulator faulted.
    Device = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

fn status_of(e: &Error) -> TpucStatus {
    use Error::*;
    match e {
        Io { .. } => TpucStatus::Io,
        InvalidGraph(_) | Parse { .. } | BadArchive(_) | BadTensor { .. } | CalibParse { .. } | BadProgram(_) => {
            TpucStatus::Parse
        }
        Verify { .. } | WrongState { .. } | NotCalibrated => TpucStatus::Verify,
        UnsupportedCompression(_)
        | UnsupportedLayout(_)
        | UnsupportedDType(_)
        | UnsupportedOp { .. }
        | UnsupportedRank { .. }
        | UnsupportedAttr { .. }
        | UnsupportedMode { .. }
        | UnsupportedCast { .. } => TpucStatus::Unsupported,
        UnknownChip(_) | ShapeMismatch(..) | NothingToCompare => TpucStatus::InvalidArgument,
        WeightNotFound(_)
        | WeightShapeMismatch { .. }
        | DuplicateWeight(_)
        | MissingInput(_)
        | InvalidWeight(_)
        | NonFiniteActivation(_)
        | MissingCalibration(_)
        | NoSamples
        | BadInput { .. } => TpucStatus::Data,
        OutOfDeviceMemory { .. } | Codegen(_) | EmptySlice | RequantOverflow(_) | SizeOverflow | OutOfHostMemory(_) => {
            TpucStatus::Compile
        }
        AccumOverflow | MemoryFault { .. } | IllegalInstruction { .. } | StaleRead { .. } => TpucStatus::Device,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(TpucStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TpucStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TpucStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TpucStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            TpucStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out<T>(slot: *mut *mut T, value: T) -> Result<(), Fail> {
    if slot.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// A compiler module in any state.
pub struct TpucModule {
    inner: ModuleIR,
}

/// A compiled `.tpm` program.
pub struct TpucProgram {
    inner: TpuProgram,
}

/// A set of named tensors.
pub struct TpucTensors {
    inner: TensorMap,
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn tpuc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tpuc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Short name of a status code, static storage.
#[no_mangle]
pub extern "C" fn tpuc_status_name(status: TpucStatus) -> *const c_char {
    let s: &'static str = match status {
        TpucStatus::Ok => "ok\0",
        TpucStatus::InvalidArgument => "invalid argument\0",
        TpucStatus::Io => "i/o error\0",
        TpucStatus::Parse => "parse error\0",
        TpucStatus::Verify => "verify error\0",
        TpucStatus::Unsupported => "unsupported\0",
        TpucStatus::Data => "data error\0",
        TpucStatus::Compile => "compile error\0",
        TpucStatus::Device => "device fault\0",
        TpucStatus::Internal => "internal error\0",
    };
    s.as_ptr().cast()
}

/// Imports a JSON interchange graph and its NPZ weights.
///
/// # Safety
/// Paths must be valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_module_import(
    graph_json: *const c_char,
    weights_npz: *const c_char,
    out_module: *mut *mut TpucModule,
) -> TpucStatus {
    guard(|| {
        let m = import_files(
            path_arg(graph_json, "graph_json")?,
            path_arg(weights_npz, "weights_npz")?,
        )?;
        out(out_module, TpucModule { inner: m })
    })
}

/// Loads a `.tmir` module and the weight file it names.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_module_load(path: *const c_char, out_module: *mut *mut TpucModule) -> TpucStatus {
    guard(|| {
        let m = load_module(path_arg(path, "path")?)?;
        out(out_module, TpucModule { inner: m })
    })
}

/// Writes a module as `.tmir` text plus its weight file.
///
/// # Safety
/// `module` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn tpuc_module_save(module: *const TpucModule, path: *const c_char) -> TpucStatus {
    guard(|| {
        save_module(&handle(module, "module")?.inner, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `module` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tpuc_module_free(module: *mut TpucModule) {
    if !module.is_null() {
        drop(Box::from_raw(module));
    }
}

/// Builds a calibration table from `n` sample input sets and writes it to
/// `table_path`. `method` is `kl`, `minmax` or `percentile:<q>`.
///
/// # Safety
/// `samples` must point to `n` valid tensor handles.
#[no_mangle]
pub unsafe extern "C" fn tpuc_calibrate(
    module: *const TpucModule,
    samples: *const *const TpucTensors,
    n: usize,
    method: *const c_char,
    table_path: *const c_char,
) -> TpucStatus {
    guard(|| {
        let m = &handle(module, "module")?.inner;
        if samples.is_null() && n > 0 {
            return Err(invalid("samples is null"));
        }
        let method: CalibMethod = str_arg(method, "method")?.parse().map_err(invalid)?;
        let mut set = Vec::with_capacity(n);
        for i in 0..n {
            set.push(handle(*samples.add(i), "sample")?.inner.clone());
        }
        let table = calibrate(&tpuc::transforms::canonicalize(m)?, &set, method)?;
        write_calib_table(path_arg(table_path, "table_path")?, &table)?;
        Ok(())
    })
}

/// Compiles `module` to a program. `mode` is `F32`, `BF16`, `F16` or `INT8`;
/// `chip` names a registered chip or is null for the default. INT8 needs
/// `calib_table`; it is ignored otherwise and may be null.
///
/// # Safety
/// Handles must come from this library; strings must be valid or null where
/// allowed.
#[no_mangle]
pub unsafe extern "C" fn tpuc_deploy(
    module: *const TpucModule,
    mode: *const c_char,
    chip: *const c_char,
    calib_table: *const c_char,
    asymmetric: bool,
    out_program: *mut *mut TpucProgram,
) -> TpucStatus {
    guard(|| {
        let m = &handle(module, "module")?.inner;
        let mode: Mode = str_arg(mode, "mode")?.parse().map_err(invalid)?;
        let mut o = DeployOptions::new(mode);
        if !chip.is_null() {
            o.chip = ChipConfig::by_name(str_arg(chip, "chip")?)?;
        }
        o.asymmetric = asymmetric;
        if mode == Mode::Int8 {
            if calib_table.is_null() {
                return Err(invalid("INT8 needs a calibration table"));
            }
            o.calib = Some(read_calib_table(path_arg(calib_table, "calib_table")?)?);
        }
        let d = deploy(m, &o)?;
        out(out_program, TpucProgram { inner: d.program })
    })
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_program_load(path: *const c_char, out_program: *mut *mut TpucProgram) -> TpucStatus {
    guard(|| {
        let p = load_program(path_arg(path, "path")?)?;
        out(out_program, TpucProgram { inner: p })
    })
}

/// # Safety
/// `program` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn tpuc_program_save(program: *const TpucProgram, path: *const c_char) -> TpucStatus {
    guard(|| {
        save_program(&handle(program, "program")?.inner, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of commands in the program's stream, or 0 for null.
///
/// # Safety
/// `program` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tpuc_program_num_commands(program: *const TpucProgram) -> usize {
    program.as_ref().map_or(0, |p| p.inner.commands.len())
}

/// # Safety
/// `program` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tpuc_program_free(program: *mut TpucProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

/// Executes `program` on the simulator. Outputs come back as F32, BF16 or
/// F16 tensors named after the program outputs.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_run(
    program: *const TpucProgram,
    inputs: *const TpucTensors,
    out_tensors: *mut *mut TpucTensors,
) -> TpucStatus {
    guard(|| {
        let r = run_program(&handle(program, "program")?.inner, &handle(inputs, "inputs")?.inner)?;
        out(out_tensors, TpucTensors { inner: r })
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_new(out_tensors: *mut *mut TpucTensors) -> TpucStatus {
    guard(|| {
        out(
            out_tensors,
            TpucTensors {
                inner: TensorMap::new(),
            },
        )
    })
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_load_npz(path: *const c_char, out_tensors: *mut *mut TpucTensors) -> TpucStatus {
    guard(|| {
        let t = npz_read(path_arg(path, "path")?)?;
        out(out_tensors, TpucTensors { inner: t })
    })
}

/// # Safety
/// `tensors` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_save_npz(tensors: *const TpucTensors, path: *const c_char) -> TpucStatus {
    guard(|| {
        npz_write(path_arg(path, "path")?, &handle(tensors, "tensors")?.inner)?;
        Ok(())
    })
}

/// Number of tensors in the set, or 0 for null.
///
/// # Safety
/// `tensors` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_len(tensors: *const TpucTensors) -> usize {
    tensors.as_ref().map_or(0, |t| t.inner.len())
}

/// Inserts or replaces an F32 tensor of `rank` dims and `len` values.
///
/// # Safety
/// `shape` must hold `rank` values and `data` `len` values.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_set_f32(
    tensors: *mut TpucTensors,
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    data: *const f32,
    len: usize,
) -> TpucStatus {
    guard(|| {
        let t = tensors.as_mut().ok_or_else(|| invalid("tensors is null"))?;
        let name = str_arg(name, "name")?;
        if (shape.is_null() && rank > 0) || (data.is_null() && len > 0) {
            return Err(invalid("shape or data is null"));
        }
        let shape = if rank == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(shape, rank)
        };
        let data = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(data, len)
        };
        if shape.iter().product::<usize>() != len {
            return Err(invalid(format!("shape {shape:?} does not hold {len} values")));
        }
        let shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
        t.inner
            .insert(name.to_string(), HostTensor::from_f32(name, shape, data)?);
        Ok(())
    })
}

/// Copies tensor `name` as F32 into `buf`. `out_len` always receives the
/// element count; a `buf` shorter than that fails with InvalidArgument
/// after setting `out_len`, so callers may query with `cap = 0`.
///
/// # Safety
/// `buf` must hold `cap` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_get_f32(
    tensors: *const TpucTensors,
    name: *const c_char,
    buf: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> TpucStatus {
    guard(|| {
        let t = handle(tensors, "tensors")?;
        let name = str_arg(name, "name")?;
        let x = t
            .inner
            .get(name)
            .ok_or_else(|| invalid(format!("no tensor `{name}`")))?;
        let v = output_f32(x)?;
        if out_len.is_null() {
            return Err(invalid("out_len is null"));
        }
        *out_len = v.len();
        if cap < v.len() || (buf.is_null() && !v.is_empty()) {
            return Err(invalid(format!("buffer holds {cap} values, need {}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// Writes the rank of tensor `name` to `out_rank` and up to `cap` dims to
/// `dims`.
///
/// # Safety
/// `dims` must hold `cap` values; `out_rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_shape(
    tensors: *const TpucTensors,
    name: *const c_char,
    dims: *mut usize,
    cap: usize,
    out_rank: *mut usize,
) -> TpucStatus {
    guard(|| {
        let t = handle(tensors, "tensors")?;
        let name = str_arg(name, "name")?;
        let x = t
            .inner
            .get(name)
            .ok_or_else(|| invalid(format!("no tensor `{name}`")))?;
        if out_rank.is_null() {
            return Err(invalid("out_rank is null"));
        }
        *out_rank = x.shape.len();
        if !dims.is_null() {
            for (i, d) in x.shape.iter().take(cap).enumerate() {
                *dims.add(i) = *d;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `tensors` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tpuc_tensors_free(tensors: *mut TpucTensors) {
    if !tensors.is_null() {
        drop(Box::from_raw(tensors));
    }
}

unsafe fn pair<'a>(x: *const f32, y: *const f32, n: usize) -> Result<(&'a [f32], &'a [f32]), Fail> {
    if x.is_null() || y.is_null() {
        return Err(invalid("vector is null"));
    }
    Ok((std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n)))
}

/// Cosine similarity of two length-`n` vectors.
///
/// # Safety
/// `x` and `y` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_cosine_similarity(x: *const f32, y: *const f32, n: usize, out: *mut f64) -> TpucStatus {
    guard(|| {
        let (a, b) = pair(x, y, n)?;
        let v = cosine_similarity(a, b)?;
        *out.as_mut().ok_or_else(|| invalid("out is null"))? = v;
        Ok(())
    })
}

/// Euclidean similarity `1 - |x-y| / |(x+y)/2|` of two length-`n` vectors.
///
/// # Safety
/// `x` and `y` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpuc_euclidean_similarity(
    x: *const f32,
    y: *const f32,
    n: usize,
    out: *mut f64,
) -> TpucStatus {
    guard(|| {
        let (a, b) = pair(x, y, n)?;
        let v = euclidean_similarity(a, b)?;
        *out.as_mut().ok_or_else(|| invalid("out is null"))? = v;
        Ok(())
    })
}

//! Virtual ISA: instructions and their little-endian wire encoding.
//!
//! Each instruction is `opcode: u8, payload_len: u32, payload`. Unknown
//! opcodes are kept verbatim so a program re-serializes bit for bit; the
//! simulator rejects them when it reaches them.

use crate::error::{Error, Result};
use crate::kernels::{
    AddDesc, CastDesc, ConvDesc, Kernel, MatMulDesc, PoolDesc, PoolKind, QuantArgs, ReluDesc, SoftmaxDesc,
};
use crate::tensor_store::DType;

pub const DMA_LOAD: u8 = 1;
pub const DMA_STORE: u8 = 2;
pub const CONV2D: u8 = 3;
pub const POOL: u8 = 4;
pub const ELTWISE: u8 = 5;
pub const MATMUL: u8 = 6;
pub const CAST: u8 = 7;
pub const RELU: u8 = 8;
pub const SOFTMAX: u8 = 9;
pub const COPY: u8 = 10;
pub const END: u8 = 11;

pub fn opcode_name(op: u8) -> &'static str {
    match op {
        DMA_LOAD => "DMA_LOAD",
        DMA_STORE => "DMA_STORE",
        CONV2D => "CONV2D",
        POOL => "POOL",
        ELTWISE => "ELTWISE",
        MATMUL => "MATMUL",
        CAST => "CAST",
        RELU => "RELU",
        SOFTMAX => "SOFTMAX",
        COPY => "COPY",
        END => "END",
        _ => "ILLEGAL",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Ddr,
    Lmem,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Ddr => "DDR",
            Space::Lmem => "LMEM",
        }
    }
}

/// A view of an NCHW buffer: batches `n0..n0+nl` and rows `h0..h0+hl` of a
/// tensor with `dims`. DDR buffers are dense; LMEM buffers are spread over
/// lanes by channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    pub space: Space,
    pub addr: u64,
    pub dtype: DType,
    pub dims: [u32; 4],
    pub eu_align: bool,
    pub n0: u32,
    pub nl: u32,
    pub h0: u32,
    pub hl: u32,
}

impl TensorRef {
    /// The whole buffer.
    pub fn full(space: Space, addr: u64, dtype: DType, dims: [u32; 4], eu_align: bool) -> Self {
        TensorRef {
            space,
            addr,
            dtype,
            dims,
            eu_align,
            n0: 0,
            nl: dims[0],
            h0: 0,
            hl: dims[2],
        }
    }

    pub fn view_elems(&self) -> u64 {
        self.nl as u64 * self.dims[1] as u64 * self.hl as u64 * self.dims[3] as u64
    }

    pub fn view_bytes(&self) -> u64 {
        self.view_elems() * self.dtype.byte_size() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    /// DDR view -> LMEM buffer. `begin_step` opens a new slice step.
    DmaLoad {
        src: TensorRef,
        dst: TensorRef,
        begin_step: bool,
    },
    DmaStore {
        src: TensorRef,
        dst: TensorRef,
    },
    Compute {
        kernel: Kernel,
        operands: Vec<TensorRef>,
        result: TensorRef,
    },
    End,
    Unknown {
        opcode: u8,
        payload: Vec<u8>,
    },
}

impl Instruction {
    pub fn opcode(&self) -> u8 {
        match self {
            Instruction::DmaLoad { .. } => DMA_LOAD,
            Instruction::DmaStore { .. } => DMA_STORE,
            Instruction::Compute { kernel, .. } => kernel_opcode(kernel),
            Instruction::End => END,
            Instruction::Unknown { opcode, .. } => *opcode,
        }
    }
}

pub fn kernel_opcode(k: &Kernel) -> u8 {
    match k {
        Kernel::Conv(_) => CONV2D,
        Kernel::Pool(_) => POOL,
        Kernel::Add(_) => ELTWISE,
        Kernel::MatMul(_) => MATMUL,
        Kernel::Cast(_) => CAST,
        Kernel::Relu(_) => RELU,
        Kernel::Softmax(_) => SOFTMAX,
        Kernel::Copy { .. } => COPY,
    }
}

/// Little-endian cursor over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::BadProgram(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn pos(&self) -> usize {
        self.pos
    }
}

/// Fixed little-endian encoding.
pub trait Wire: Sized {
    fn put(&self, w: &mut Vec<u8>);
    fn get(r: &mut Reader) -> Result<Self>;
}

macro_rules! wire_int {
    ($($t:ty),*) => {$(
        impl Wire for $t {
            fn put(&self, w: &mut Vec<u8>) {
                w.extend_from_slice(&self.to_le_bytes());
            }
            fn get(r: &mut Reader) -> Result<Self> {
                Ok(<$t>::from_le_bytes(r.take(std::mem::size_of::<$t>())?.try_into().unwrap()))
            }
        }
    )*};
}
wire_int!(u8, u32, i32, u64, f32, f64);

impl Wire for bool {
    fn put(&self, w: &mut Vec<u8>) {
        (*self as u8).put(w)
    }
    fn get(r: &mut Reader) -> Result<Self> {
        match u8::get(r)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::BadProgram(format!("bad bool byte {b}"))),
        }
    }
}

impl Wire for DType {
    fn put(&self, w: &mut Vec<u8>) {
        self.code().put(w)
    }
    fn get(r: &mut Reader) -> Result<Self> {
        let c = u8::get(r)?;
        DType::from_code(c).ok_or_else(|| Error::BadProgram(format!("bad dtype code {c}")))
    }
}

impl<T: Wire> Wire for Vec<T> {
    fn put(&self, w: &mut Vec<u8>) {
        (self.len() as u32).put(w);
        self.iter().for_each(|x| x.put(w));
    }
    fn get(r: &mut Reader) -> Result<Self> {
        let n = u32::get(r)? as usize;
        if n > r.buf.len() {
            return Err(Error::BadProgram(format!("array length {n} exceeds payload")));
        }
        (0..n).map(|_| T::get(r)).collect()
    }
}

impl Wire for [u32; 4] {
    fn put(&self, w: &mut Vec<u8>) {
        self.iter().for_each(|x| x.put(w));
    }
    fn get(r: &mut Reader) -> Result<Self> {
        Ok([u32::get(r)?, u32::get(r)?, u32::get(r)?, u32::get(r)?])
    }
}

impl Wire for Space {
    fn put(&self, w: &mut Vec<u8>) {
        (*self as u8).put(w)
    }
    fn get(r: &mut Reader) -> Result<Self> {
        match u8::get(r)? {
            0 => Ok(Space::Ddr),
            1 => Ok(Space::Lmem),
            b => Err(Error::BadProgram(format!("bad address space {b}"))),
        }
    }
}

impl Wire for PoolKind {
    fn put(&self, w: &mut Vec<u8>) {
        (*self as u8).put(w)
    }
    fn get(r: &mut Reader) -> Result<Self> {
        match u8::get(r)? {
            0 => Ok(PoolKind::Max),
            1 => Ok(PoolKind::Avg),
            b => Err(Error::BadProgram(format!("bad pool kind {b}"))),
        }
    }
}

macro_rules! wire_struct {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl Wire for $t {
            fn put(&self, w: &mut Vec<u8>) {
                $(self.$f.put(w);)*
            }
            fn get(r: &mut Reader) -> Result<Self> {
                Ok($t { $($f: Wire::get(r)?),* })
            }
        }
    };
}

wire_struct!(TensorRef {
    space,
    addr,
    dtype,
    dims,
    eu_align,
    n0,
    nl,
    h0,
    hl
});
wire_struct!(QuantArgs {
    zp_in,
    zp_out,
    qmin,
    qmax,
    act_max,
    multiplier,
    rshift
});
wire_struct!(ConvDesc {
    dtype,
    n,
    ic,
    ih,
    iw,
    oc,
    oh,
    ow,
    kh,
    kw,
    sh,
    sw,
    dh,
    dw,
    pt,
    pl,
    group,
    has_bias,
    do_relu,
    relu_limit,
    q
});
wire_struct!(PoolDesc {
    kind,
    dtype,
    n,
    c,
    ih,
    iw,
    oh,
    ow,
    kh,
    kw,
    sh,
    sw,
    pt,
    pl,
    count_include_pad,
    q
});
wire_struct!(AddDesc {
    dtype,
    n,
    c,
    h,
    w,
    a_bcast,
    b_bcast,
    zp_a,
    zp_b,
    q
});
wire_struct!(MatMulDesc {
    dtype,
    m,
    k,
    n,
    right_transpose,
    has_bias,
    do_relu,
    relu_limit,
    q
});
wire_struct!(CastDesc {
    from,
    to,
    count,
    scale,
    zero_point,
    qmin,
    qmax
});
wire_struct!(ReluDesc {
    dtype,
    count,
    relu_limit,
    zp,
    act_max
});
wire_struct!(SoftmaxDesc {
    dtype,
    outer,
    axis,
    inner
});

fn put_kernel(k: &Kernel, w: &mut Vec<u8>) {
    match k {
        Kernel::Conv(d) => d.put(w),
        Kernel::Pool(d) => d.put(w),
        Kernel::Add(d) => d.put(w),
        Kernel::MatMul(d) => d.put(w),
        Kernel::Cast(d) => d.put(w),
        Kernel::Relu(d) => d.put(w),
        Kernel::Softmax(d) => d.put(w),
        Kernel::Copy { bytes } => bytes.put(w),
    }
}

fn get_kernel(op: u8, r: &mut Reader) -> Result<Kernel> {
    Ok(match op {
        CONV2D => Kernel::Conv(Wire::get(r)?),
        POOL => Kernel::Pool(Wire::get(r)?),
        ELTWISE => Kernel::Add(Wire::get(r)?),
        MATMUL => Kernel::MatMul(Wire::get(r)?),
        CAST => Kernel::Cast(Wire::get(r)?),
        RELU => Kernel::Relu(Wire::get(r)?),
        SOFTMAX => Kernel::Softmax(Wire::get(r)?),
        COPY => Kernel::Copy { bytes: Wire::get(r)? },
        _ => unreachable!("caller filters opcodes"),
    })
}

pub fn encode_instruction(ins: &Instruction, w: &mut Vec<u8>) {
    let mut p = Vec::new();
    match ins {
        Instruction::DmaLoad { src, dst, begin_step } => {
            src.put(&mut p);
            dst.put(&mut p);
            begin_step.put(&mut p);
        }
        Instruction::DmaStore { src, dst } => {
            src.put(&mut p);
            dst.put(&mut p);
        }
        Instruction::Compute {
            kernel,
            operands,
            result,
        } => {
            put_kernel(kernel, &mut p);
            operands.put(&mut p);
            result.put(&mut p);
        }
        Instruction::End => {}
        Instruction::Unknown { payload, .. } => p.extend_from_slice(payload),
    }
    ins.opcode().put(w);
    (p.len() as u32).put(w);
    w.extend_from_slice(&p);
}

pub fn decode_instruction(r: &mut Reader) -> Result<Instruction> {
    let op = u8::get(r)?;
    let len = u32::get(r)? as usize;
    let payload = r.take(len)?;
    let mut p = Reader::new(payload);
    let ins = match op {
        DMA_LOAD => Instruction::DmaLoad {
            src: Wire::get(&mut p)?,
            dst: Wire::get(&mut p)?,
            begin_step: Wire::get(&mut p)?,
        },
        DMA_STORE => Instruction::DmaStore {
            src: Wire::get(&mut p)?,
            dst: Wire::get(&mut p)?,
        },
        CONV2D..=COPY => Instruction::Compute {
            kernel: get_kernel(op, &mut p)?,
            operands: Wire::get(&mut p)?,
            result: Wire::get(&mut p)?,
        },
        END => Instruction::End,
        _ => {
            return Ok(Instruction::Unknown {
                opcode: op,
                payload: payload.to_vec(),
            })
        }
    };
    if !p.done() {
        return Err(Error::BadProgram(format!(
            "{} payload has {} trailing bytes",
            opcode_name(op),
            len - p.pos()
        )));
    }
    Ok(ins)
}

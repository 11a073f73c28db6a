use crate::tensor_store::DType;

/// Affine map `real = scale * (q - zero_point)` applied to every element.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuant {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub storage: DType,
    pub expressed: DType,
}

impl UniformQuant {
    pub fn dequantize(&self, q: i32) -> f32 {
        (self.scale * (q - self.zero_point) as f64) as f32
    }
}

/// Per-index affine maps along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAxisQuant {
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub axis: usize,
    pub qmin: i32,
    pub qmax: i32,
    pub storage: DType,
    pub expressed: DType,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum QuantAnnotation {
    #[default]
    None,
    Calibrated {
        min: f64,
        max: f64,
    },
    Uniform(UniformQuant),
    UniformPerAxis(PerAxisQuant),
}

impl QuantAnnotation {
    pub fn is_none(&self) -> bool {
        matches!(self, QuantAnnotation::None)
    }

    pub fn uniform(&self) -> Option<&UniformQuant> {
        match self {
            QuantAnnotation::Uniform(u) => Some(u),
            _ => None,
        }
    }

    pub fn calibrated(&self) -> Option<(f64, f64)> {
        match self {
            QuantAnnotation::Calibrated { min, max } => Some((*min, *max)),
            _ => None,
        }
    }
}

/// Every compile-time fact about one SSA value.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorType {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub quant: QuantAnnotation,
    pub address: Option<u64>,
}

impl TensorType {
    pub fn new(shape: Vec<usize>, dtype: DType) -> Self {
        TensorType {
            shape,
            dtype,
            quant: QuantAnnotation::None,
            address: None,
        }
    }

    pub fn f32(shape: Vec<usize>) -> Self {
        TensorType::new(shape, DType::F32)
    }

    pub fn with_quant(mut self, quant: QuantAnnotation) -> Self {
        self.quant = quant;
        self
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape padded on the right to NCHW, for rank <= 4.
    pub fn nchw(&self) -> Option<[usize; 4]> {
        if self.shape.len() > 4 || self.shape.is_empty() {
            return None;
        }
        let mut out = [1; 4];
        out[..self.shape.len()].copy_from_slice(&self.shape);
        Some(out)
    }

    /// Same storage and quantization, ignoring the device address.
    pub fn same_storage(&self, other: &TensorType) -> bool {
        self.dtype == other.dtype && self.quant == other.quant && self.shape == other.shape
    }
}

/// Index into [`crate::ir::ModuleIR::values`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub u32);

impl ValueId {
    /// Placeholder for an absent optional operand.
    pub const NONE: ValueId = ValueId(u32::MAX);

    pub fn is_none(self) -> bool {
        self == ValueId::NONE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueInfo {
    /// The location string; keys weights and activation dumps.
    pub name: String,
    pub ty: TensorType,
}

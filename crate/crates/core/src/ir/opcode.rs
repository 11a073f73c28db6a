use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dialect {
    Top,
    Tpu,
}

/// Operator kinds shared by both dialects. Not every kind exists in both:
/// `BatchNorm` is TOP-only, `Cast`/`Group`/`Yield` are TPU-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Weight,
    Conv,
    Relu,
    BatchNorm,
    Add,
    MaxPool,
    AvgPool,
    MatMul,
    Reshape,
    Softmax,
    Cast,
    Group,
    Yield,
}

/// A dialect-qualified opcode such as `top.Conv` or `tpu.Conv2D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Opcode {
    pub dialect: Dialect,
    pub kind: OpKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    Variadic,
}

#[derive(Debug, Clone, Copy)]
pub struct Signature {
    pub operands: Arity,
    pub results: Arity,
    /// Operand positions that may hold the NONE sentinel.
    pub optional: &'static [usize],
}

pub const TOP_KINDS: [OpKind; 11] = [
    OpKind::Input,
    OpKind::Weight,
    OpKind::Conv,
    OpKind::Relu,
    OpKind::BatchNorm,
    OpKind::Add,
    OpKind::MaxPool,
    OpKind::AvgPool,
    OpKind::MatMul,
    OpKind::Reshape,
    OpKind::Softmax,
];

pub const TPU_KINDS: [OpKind; 13] = [
    OpKind::Conv,
    OpKind::Cast,
    OpKind::Group,
    OpKind::Yield,
    OpKind::Relu,
    OpKind::Add,
    OpKind::MaxPool,
    OpKind::AvgPool,
    OpKind::MatMul,
    OpKind::Reshape,
    OpKind::Softmax,
    OpKind::Input,
    OpKind::Weight,
];

impl Opcode {
    pub const fn top(kind: OpKind) -> Self {
        Opcode {
            dialect: Dialect::Top,
            kind,
        }
    }

    pub const fn tpu(kind: OpKind) -> Self {
        Opcode {
            dialect: Dialect::Tpu,
            kind,
        }
    }

    pub fn is_valid(self) -> bool {
        match self.dialect {
            Dialect::Top => TOP_KINDS.contains(&self.kind),
            Dialect::Tpu => TPU_KINDS.contains(&self.kind),
        }
    }

    pub fn name(self) -> &'static str {
        use OpKind::*;
        match (self.dialect, self.kind) {
            (Dialect::Tpu, Conv) => "Conv2D",
            (_, Input) => "Input",
            (_, Weight) => "Weight",
            (_, Conv) => "Conv",
            (_, Relu) => "Relu",
            (_, BatchNorm) => "BatchNorm",
            (_, Add) => "Add",
            (_, MaxPool) => "MaxPool",
            (_, AvgPool) => "AvgPool",
            (_, MatMul) => "MatMul",
            (_, Reshape) => "Reshape",
            (_, Softmax) => "Softmax",
            (_, Cast) => "Cast",
            (_, Group) => "Group",
            (_, Yield) => "Yield",
        }
    }

    pub fn parse(s: &str) -> Option<Opcode> {
        let (dialect, name) = s.split_once('.')?;
        let dialect = match dialect {
            "top" => Dialect::Top,
            "tpu" => Dialect::Tpu,
            _ => return None,
        };
        let kinds: &[OpKind] = match dialect {
            Dialect::Top => &TOP_KINDS,
            Dialect::Tpu => &TPU_KINDS,
        };
        kinds
            .iter()
            .map(|&kind| Opcode { dialect, kind })
            .find(|op| op.name() == name)
    }

    pub fn signature(self) -> Signature {
        use OpKind::*;
        let (operands, results, optional): (Arity, Arity, &'static [usize]) = match self.kind {
            Input | Weight => (Arity::Exactly(0), Arity::Exactly(1), &[]),
            Conv | MatMul => (Arity::Exactly(3), Arity::Exactly(1), &[2]),
            BatchNorm => (Arity::Exactly(5), Arity::Exactly(1), &[]),
            Add => (Arity::Exactly(2), Arity::Exactly(1), &[]),
            Relu | MaxPool | AvgPool | Reshape | Softmax | Cast => (Arity::Exactly(1), Arity::Exactly(1), &[]),
            Group => (Arity::Variadic, Arity::Variadic, &[]),
            Yield => (Arity::Variadic, Arity::Exactly(0), &[]),
        };
        Signature {
            operands,
            results,
            optional,
        }
    }

    /// Ops the backend can run out of local memory inside a layer group.
    pub fn is_local_capable(self) -> bool {
        self.dialect == Dialect::Tpu
            && matches!(
                self.kind,
                OpKind::Conv | OpKind::Relu | OpKind::Add | OpKind::MaxPool | OpKind::AvgPool | OpKind::Cast
            )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dialect {
            Dialect::Top => "top",
            Dialect::Tpu => "tpu",
        };
        write!(f, "{d}.{}", self.name())
    }
}

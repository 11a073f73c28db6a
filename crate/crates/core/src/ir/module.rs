use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::tensor_store::TensorMap;

use super::attr::{AttrMap, Attribute};
use super::opcode::{OpKind, Opcode};
use super::types::{TensorType, ValueId, ValueInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleState {
    TopF32,
    TopCalibrated,
    TpuLowered,
    TpuAddressed,
}

impl ModuleState {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleState::TopF32 => "TOP_F32",
            ModuleState::TopCalibrated => "TOP_CALIBRATED",
            ModuleState::TpuLowered => "TPU_LOWERED",
            ModuleState::TpuAddressed => "TPU_ADDRESSED",
        }
    }

    pub fn is_top(self) -> bool {
        matches!(self, ModuleState::TopF32 | ModuleState::TopCalibrated)
    }
}

impl fmt::Display for ModuleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ModuleState::TopF32,
            ModuleState::TopCalibrated,
            ModuleState::TpuLowered,
            ModuleState::TpuAddressed,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| format!("unknown module state `{s}`"))
    }
}

/// Target precision of the lowered module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Int8,
    Bf16,
    F16,
    F32,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Int8, Mode::Bf16, Mode::F16, Mode::F32];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Int8 => "INT8",
            Mode::Bf16 => "BF16",
            Mode::F16 => "F16",
            Mode::F32 => "F32",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode `{s}` (expected INT8, BF16, F16 or F32)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Operation {
    pub opcode: Opcode,
    pub operands: Vec<ValueId>,
    pub results: Vec<ValueId>,
    pub attrs: AttrMap,
    /// Body of a `tpu.Group`; its results are the values its `tpu.Yield` names.
    pub region: Option<Vec<Operation>>,
}

impl Operation {
    pub fn new(opcode: Opcode, operands: Vec<ValueId>, results: Vec<ValueId>) -> Self {
        Operation {
            opcode,
            operands,
            results,
            attrs: AttrMap::new(),
            region: None,
        }
    }

    pub fn with_attr(mut self, key: &str, value: Attribute) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn set_attr(&mut self, key: &str, value: Attribute) {
        self.attrs.insert(key.to_string(), value);
    }

    pub fn kind(&self) -> OpKind {
        self.opcode.kind
    }

    pub fn result(&self) -> ValueId {
        self.results[0]
    }

    /// Operands that are present (skips NONE).
    pub fn present_operands(&self) -> impl Iterator<Item = ValueId> + '_ {
        self.operands.iter().copied().filter(|v| !v.is_none())
    }
}

/// One module with a single `main` function.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleIR {
    pub name: String,
    /// NPZ path, relative to the module file.
    pub weight_file: String,
    pub state: ModuleState,
    pub chip: Option<String>,
    pub mode: Option<Mode>,
    pub asymmetric: bool,
    pub values: Vec<ValueInfo>,
    pub ops: Vec<Operation>,
    pub inputs: Vec<ValueId>,
    pub outputs: Vec<ValueId>,
    /// In-memory contents of `weight_file`, keyed by weight location.
    pub weights: TensorMap,
}

impl ModuleIR {
    pub fn new(name: impl Into<String>, weight_file: impl Into<String>) -> Self {
        ModuleIR {
            name: name.into(),
            weight_file: weight_file.into(),
            state: ModuleState::TopF32,
            chip: None,
            mode: None,
            asymmetric: false,
            values: Vec::new(),
            ops: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            weights: TensorMap::new(),
        }
    }

    pub fn add_value(&mut self, name: impl Into<String>, ty: TensorType) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        self.values.push(ValueInfo { name: name.into(), ty });
        id
    }

    pub fn value(&self, id: ValueId) -> &ValueInfo {
        &self.values[id.index()]
    }

    pub fn value_mut(&mut self, id: ValueId) -> &mut ValueInfo {
        &mut self.values[id.index()]
    }

    pub fn ty(&self, id: ValueId) -> &TensorType {
        &self.values[id.index()].ty
    }

    pub fn name_of(&self, id: ValueId) -> &str {
        &self.values[id.index()].name
    }

    /// Depth-first walk over every op, region bodies included.
    pub fn walk(&self) -> Vec<&Operation> {
        fn rec<'a>(ops: &'a [Operation], out: &mut Vec<&'a Operation>) {
            for op in ops {
                out.push(op);
                if let Some(body) = &op.region {
                    rec(body, out);
                }
            }
        }
        let mut out = Vec::new();
        rec(&self.ops, &mut out);
        out
    }

    /// Ops in execution order with Group wrappers flattened away.
    pub fn flat_compute_ops(&self) -> Vec<&Operation> {
        self.walk()
            .into_iter()
            .filter(|op| !matches!(op.kind(), OpKind::Group | OpKind::Yield))
            .collect()
    }

    /// Values defined by some live op, in definition order.
    pub fn live_values(&self) -> Vec<ValueId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for op in self.walk() {
            if op.kind() == OpKind::Group {
                continue;
            }
            for &r in &op.results {
                if seen.insert(r) {
                    out.push(r);
                }
            }
        }
        out
    }

    /// Map from value to the op that defines it (Group results map to the
    /// inner op, not the Group).
    pub fn producers(&self) -> HashMap<ValueId, &Operation> {
        let mut out = HashMap::new();
        for op in self.walk() {
            if op.kind() == OpKind::Group {
                continue;
            }
            for &r in &op.results {
                out.insert(r, op);
            }
        }
        out
    }

    /// Number of uses of each value (Yield uses excluded), module outputs
    /// counted once each.
    pub fn use_counts(&self) -> HashMap<ValueId, usize> {
        let mut out: HashMap<ValueId, usize> = HashMap::new();
        for op in self.walk() {
            if matches!(op.kind(), OpKind::Group | OpKind::Yield) {
                continue;
            }
            for v in op.present_operands() {
                *out.entry(v).or_default() += 1;
            }
        }
        for &v in &self.outputs {
            *out.entry(v).or_default() += 1;
        }
        out
    }

    pub fn find_value(&self, name: &str) -> Option<ValueId> {
        self.live_values().into_iter().find(|&v| self.name_of(v) == name)
    }

    /// `base`, or `base_N` for the smallest N that is unused.
    pub fn unique_name(&self, base: &str) -> String {
        let taken: HashSet<&str> = self
            .live_values()
            .into_iter()
            .map(|v| self.name_of(v))
            .chain(self.weights.keys().map(String::as_str))
            .collect();
        if !taken.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !taken.contains(n.as_str()))
            .unwrap()
    }

    /// Replace every use of `from` with `to` (module outputs included).
    pub fn replace_uses(&mut self, from: ValueId, to: ValueId) {
        fn rec(ops: &mut [Operation], from: ValueId, to: ValueId) {
            for op in ops {
                if op.kind() == OpKind::Group {
                    // results are re-exports of the body and follow it
                    for r in &mut op.results {
                        if *r == from {
                            *r = to;
                        }
                    }
                }
                for v in &mut op.operands {
                    if *v == from {
                        *v = to;
                    }
                }
                if let Some(body) = &mut op.region {
                    rec(body, from, to);
                }
            }
        }
        rec(&mut self.ops, from, to);
        for v in &mut self.outputs {
            if *v == from {
                *v = to;
            }
        }
    }

    /// Renumber values in definition order and drop unreferenced entries.
    pub fn compact(&mut self) {
        let order = self.live_values();
        let mut remap: HashMap<ValueId, ValueId> = HashMap::new();
        let mut values = Vec::with_capacity(order.len());
        for (i, v) in order.iter().enumerate() {
            remap.insert(*v, ValueId(i as u32));
            values.push(self.values[v.index()].clone());
        }
        let map = |v: &mut ValueId| {
            if !v.is_none() {
                if let Some(n) = remap.get(v) {
                    *v = *n;
                }
            }
        };
        fn rec(ops: &mut [Operation], map: &dyn Fn(&mut ValueId)) {
            for op in ops {
                op.operands.iter_mut().for_each(map);
                op.results.iter_mut().for_each(map);
                if let Some(body) = &mut op.region {
                    rec(body, map);
                }
            }
        }
        rec(&mut self.ops, &map);
        self.inputs.iter_mut().for_each(map);
        self.outputs.iter_mut().for_each(map);
        self.values = values;
    }

    /// Drop ops whose results are never used (inputs always survive), then
    /// weights no longer referenced by any Weight op.
    pub fn remove_dead_ops(&mut self) {
        loop {
            let uses = self.use_counts();
            let before = self.ops.len();
            self.ops.retain(|op| {
                op.kind() == OpKind::Input
                    || op.kind() == OpKind::Group
                    || op.results.iter().any(|r| uses.get(r).copied().unwrap_or(0) > 0)
            });
            if self.ops.len() == before {
                break;
            }
        }
        let referenced: HashSet<String> = self
            .walk()
            .into_iter()
            .filter(|op| op.kind() == OpKind::Weight)
            .map(|op| self.name_of(op.result()).to_string())
            .collect();
        self.weights.retain(|k, _| referenced.contains(k));
    }

    /// Weight ops' results, in op order.
    pub fn weight_values(&self) -> Vec<ValueId> {
        self.walk()
            .into_iter()
            .filter(|op| op.kind() == OpKind::Weight)
            .map(|op| op.result())
            .collect()
    }

    pub fn is_weight(&self, v: ValueId) -> bool {
        self.producers().get(&v).is_some_and(|op| op.kind() == OpKind::Weight)
    }

    /// Lookup table name -> value for all live values.
    pub fn names(&self) -> BTreeMap<String, ValueId> {
        self.live_values()
            .into_iter()
            .map(|v| (self.name_of(v).to_string(), v))
            .collect()
    }
}

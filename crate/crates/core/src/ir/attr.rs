use std::collections::BTreeMap;

/// Per-op tiling record attached to ops inside a `tpu.Group`.
///
/// Addresses and sizes are per-lane LMEM bytes. `h_idx`/`h_slice` hold the
/// output rows the op computes in each H step; `n_idx`/`n_slice` the batch
/// range of each N step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerGroupInfo {
    pub out_addr: i64,
    pub out_size: i64,
    pub buffer_addr: i64,
    pub buffer_size: i64,
    pub eu_align: bool,
    pub h_idx: Vec<i64>,
    pub h_slice: Vec<i64>,
    pub n_idx: Vec<i64>,
    pub n_slice: Vec<i64>,
}

impl LayerGroupInfo {
    pub fn max_h_slice(&self) -> usize {
        self.h_slice.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn max_n_slice(&self) -> usize {
        self.n_slice.iter().copied().max().unwrap_or(0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attribute {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    IntArray(Vec<i64>),
    LayerGroup(LayerGroupInfo),
}

pub type AttrMap = BTreeMap<String, Attribute>;

/// Typed lookups with defaults.
pub trait AttrMapExt {
    fn int(&self, key: &str) -> Option<i64>;
    fn int_or(&self, key: &str, default: i64) -> i64 {
        self.int(key).unwrap_or(default)
    }
    fn float(&self, key: &str) -> Option<f64>;
    fn float_or(&self, key: &str, default: f64) -> f64 {
        self.float(key).unwrap_or(default)
    }
    fn bool_or(&self, key: &str, default: bool) -> bool;
    fn ints(&self, key: &str) -> Option<&[i64]>;
    fn group_info(&self) -> Option<&LayerGroupInfo>;
}

impl AttrMapExt for AttrMap {
    fn int(&self, key: &str) -> Option<i64> {
        match self.get(key) {
            Some(Attribute::Int(v)) => Some(*v),
            _ => None,
        }
    }

    fn float(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Some(Attribute::Float(v)) => Some(*v),
            Some(Attribute::Int(v)) => Some(*v as f64),
            _ => None,
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> bool {
        match self.get(key) {
            Some(Attribute::Bool(v)) => *v,
            _ => default,
        }
    }

    fn ints(&self, key: &str) -> Option<&[i64]> {
        match self.get(key) {
            Some(Attribute::IntArray(v)) => Some(v),
            _ => None,
        }
    }

    fn group_info(&self) -> Option<&LayerGroupInfo> {
        match self.get("group_info") {
            Some(Attribute::LayerGroup(g)) => Some(g),
            _ => None,
        }
    }
}

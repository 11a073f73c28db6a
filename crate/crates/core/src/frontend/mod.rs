//! Imports the JSON interchange graph (plus its NPZ weights) into a
//! `TOP_F32` module.
//!
//! ```json
//! {
//!   "model_name": "Sample",
//!   "inputs":  [{"name": "input", "shape": [1, 32, 100, 100], "dtype": "float32"}],
//!   "outputs": [{"name": "conv1", "shape": [1, 65, 50, 50], "dtype": "float32"}],
//!   "nodes": [{"op_type": "Conv", "name": "conv1",
//!              "inputs": ["input", "filter_conv1", "bias_conv1"],
//!              "attrs": {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [2, 2]}}],
//!   "weight_names": ["filter_conv1", "bias_conv1"]
//! }
//! ```
//!
//! Every node has one output, named after the node.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::{Error, Result};
use crate::ir::{verify_module, Attribute, ModuleIR, OpKind, Opcode, Operation, TensorType, ValueId};
use crate::ops;
use crate::tensor_store::{npz_read, DType, HostTensor, TensorMap};

pub const SUPPORTED_OPS: [&str; 12] = [
    "Conv",
    "Relu",
    "BatchNormalization",
    "Add",
    "MaxPool",
    "AveragePool",
    "GlobalAveragePool",
    "Gemm",
    "MatMul",
    "Flatten",
    "Reshape",
    "Softmax",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "float32".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op_type: String,
    pub name: String,
    pub inputs: Vec<String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, Json>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterchangeGraph {
    pub model_name: String,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub weight_names: Vec<String>,
}

impl InterchangeGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidGraph(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

/// Structural problems in a graph; empty means valid.
pub fn validate_graph(g: &InterchangeGraph) -> Vec<String> {
    let mut diags = Vec::new();
    let weights: HashSet<&str> = g.weight_names.iter().map(String::as_str).collect();
    let producers: HashMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
    let mut defined: HashSet<&str> = g.inputs.iter().map(|t| t.name.as_str()).collect();

    let mut seen = HashSet::new();
    for name in g
        .inputs
        .iter()
        .map(|t| &t.name)
        .chain(&g.weight_names)
        .chain(g.nodes.iter().map(|n| &n.name))
    {
        if !seen.insert(name.as_str()) {
            diags.push(format!("duplicate name `{name}`"));
        }
    }
    for node in &g.nodes {
        if !SUPPORTED_OPS.contains(&node.op_type.as_str()) {
            diags.push(format!("node `{}`: unsupported op_type `{}`", node.name, node.op_type));
        }
        for input in &node.inputs {
            if input.is_empty() || defined.contains(input.as_str()) || weights.contains(input.as_str()) {
                continue;
            }
            if producers.contains_key(input.as_str()) {
                diags.push(format!("node `{}` uses `{input}` before it is produced", node.name));
            } else {
                diags.push(format!("dangling edge `{input}` -> `{}`", node.name));
            }
        }
        defined.insert(&node.name);
    }
    for out in &g.outputs {
        if !defined.contains(out.name.as_str()) {
            diags.push(format!("graph output `{}` is never produced", out.name));
        }
    }
    diags
}

fn attr_ints(node: &Node, key: &str) -> Option<Vec<i64>> {
    node.attrs.get(key)?.as_array()?.iter().map(Json::as_i64).collect()
}

fn attr_int(node: &Node, key: &str, default: i64) -> i64 {
    node.attrs.get(key).and_then(Json::as_i64).unwrap_or(default)
}

fn attr_float(node: &Node, key: &str, default: f64) -> f64 {
    node.attrs.get(key).and_then(Json::as_f64).unwrap_or(default)
}

fn unsupported(node: &Node, reason: impl Into<String>) -> Error {
    Error::UnsupportedAttr {
        name: node.name.clone(),
        reason: reason.into(),
    }
}

struct Importer {
    m: ModuleIR,
    weights: TensorMap,
    env: HashMap<String, ValueId>,
}

pub fn import_files(graph: impl AsRef<Path>, weights: impl AsRef<Path>) -> Result<ModuleIR> {
    let g = InterchangeGraph::load(graph)?;
    let w = npz_read(weights)?;
    import_graph(&g, w)
}

/// Builds the TOP module. `weight_file` defaults to
/// `<model_name>_weight.npz`; callers saving elsewhere overwrite it.
pub fn import_graph(g: &InterchangeGraph, weights: TensorMap) -> Result<ModuleIR> {
    for node in &g.nodes {
        if !SUPPORTED_OPS.contains(&node.op_type.as_str()) {
            return Err(Error::UnsupportedOp {
                name: node.name.clone(),
                op_type: node.op_type.clone(),
            });
        }
    }
    let diags = validate_graph(g);
    if !diags.is_empty() {
        return Err(Error::InvalidGraph(diags.join("; ")));
    }
    let mut imp = Importer {
        m: ModuleIR::new(
            g.model_name.clone(),
            format!("{}_weight.npz", g.model_name.to_lowercase()),
        ),
        weights,
        env: HashMap::new(),
    };
    for spec in &g.inputs {
        if !matches!(spec.dtype.as_str(), "float32" | "f32") {
            return Err(Error::InvalidGraph(format!("input `{}` must be float32", spec.name)));
        }
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            return Err(Error::InvalidGraph(format!(
                "input `{}` needs a static shape",
                spec.name
            )));
        }
        let id = imp.m.add_value(spec.name.clone(), TensorType::f32(spec.shape.clone()));
        imp.m
            .ops
            .push(Operation::new(Opcode::top(OpKind::Input), vec![], vec![id]));
        imp.m.inputs.push(id);
        imp.env.insert(spec.name.clone(), id);
    }
    for node in &g.nodes {
        imp.node(node)?;
    }
    for spec in &g.outputs {
        let id = imp.env[&spec.name];
        let shape = &imp.m.ty(id).shape;
        if !spec.shape.is_empty() && &spec.shape != shape {
            return Err(Error::InvalidGraph(format!(
                "output `{}` declared {:?}, inferred {:?}",
                spec.name, spec.shape, shape
            )));
        }
        imp.m.outputs.push(id);
    }
    let mut m = imp.m;
    // weights first, in order of first use
    m.ops.sort_by_key(|op| match op.kind() {
        OpKind::Input => 0,
        OpKind::Weight => 1,
        _ => 2,
    });
    verify_module(&m)?;
    Ok(m)
}

impl Importer {
    /// Value for a node input, materializing Weight ops on first use.
    fn operand(&mut self, node: &Node, i: usize) -> Result<ValueId> {
        let Some(name) = node.inputs.get(i).filter(|n| !n.is_empty()) else {
            return Ok(ValueId::NONE);
        };
        if let Some(&v) = self.env.get(name) {
            return Ok(v);
        }
        let t = self
            .weights
            .get(name)
            .ok_or_else(|| Error::WeightNotFound(name.clone()))?;
        if t.dtype != DType::F32 {
            return Err(Error::BadTensor {
                name: name.clone(),
                reason: format!("weights must be float32, found {}", t.dtype),
            });
        }
        let id = self.m.add_value(name.clone(), TensorType::f32(t.shape.clone()));
        self.m
            .ops
            .push(Operation::new(Opcode::top(OpKind::Weight), vec![], vec![id]));
        self.m.weights.insert(name.clone(), t.clone().with_name(name.clone()));
        self.env.insert(name.clone(), id);
        Ok(id)
    }

    fn required(&mut self, node: &Node, i: usize) -> Result<ValueId> {
        let v = self.operand(node, i)?;
        if v.is_none() {
            return Err(Error::InvalidGraph(format!(
                "node `{}` is missing input {i}",
                node.name
            )));
        }
        Ok(v)
    }

    fn shape(&self, v: ValueId) -> Vec<usize> {
        self.m.ty(v).shape.clone()
    }

    /// Replace a weight's declared shape, e.g. a `[1,N]` Gemm bias to `[N]`.
    fn reshape_weight(&mut self, v: ValueId, shape: Vec<usize>) -> Result<()> {
        let name = self.m.name_of(v).to_string();
        let t = self
            .m
            .weights
            .get(&name)
            .ok_or_else(|| Error::WeightNotFound(name.clone()))?;
        let t = HostTensor::new(name.clone(), shape.clone(), t.dtype, t.data.clone())?;
        self.m.weights.insert(name, t);
        self.m.value_mut(v).ty.shape = shape;
        Ok(())
    }

    fn emit(&mut self, node: &Node, kind: OpKind, operands: Vec<ValueId>, attrs: Vec<(&str, Attribute)>) -> Result<()> {
        let mut op = Operation::new(Opcode::top(kind), operands, vec![]);
        for (k, v) in attrs {
            op.set_attr(k, v);
        }
        let shapes: Vec<Option<Vec<usize>>> = op
            .operands
            .iter()
            .map(|v| (!v.is_none()).then(|| self.shape(*v)))
            .collect();
        let refs: Vec<Option<&[usize]>> = shapes.iter().map(|s| s.as_deref()).collect();
        let shape = ops::infer_shape(&op, &refs).map_err(|reason| unsupported(node, reason))?;
        let id = self.m.add_value(node.name.clone(), TensorType::f32(shape));
        op.results.push(id);
        self.m.ops.push(op);
        self.env.insert(node.name.clone(), id);
        Ok(())
    }

    fn pool_attrs(&self, node: &Node) -> Result<Vec<(&'static str, Attribute)>> {
        if attr_int(node, "ceil_mode", 0) != 0 {
            return Err(unsupported(node, "ceil_mode is not supported"));
        }
        if node
            .attrs
            .get("auto_pad")
            .and_then(Json::as_str)
            .is_some_and(|p| p != "NOTSET")
        {
            return Err(unsupported(node, "auto_pad is not supported"));
        }
        if attr_ints(node, "dilations").is_some_and(|d| d.iter().any(|x| *x != 1)) {
            return Err(unsupported(node, "dilated pooling is not supported"));
        }
        let k = attr_ints(node, "kernel_shape").ok_or_else(|| unsupported(node, "kernel_shape required"))?;
        Ok(vec![
            ("kernel_shape", Attribute::IntArray(k)),
            (
                "strides",
                Attribute::IntArray(attr_ints(node, "strides").unwrap_or(vec![1, 1])),
            ),
            (
                "pads",
                Attribute::IntArray(attr_ints(node, "pads").unwrap_or(vec![0; 4])),
            ),
        ])
    }

    fn node(&mut self, node: &Node) -> Result<()> {
        match node.op_type.as_str() {
            "Conv" => {
                let x = self.required(node, 0)?;
                let rank = self.m.ty(x).rank();
                if rank != 4 {
                    return Err(Error::UnsupportedRank {
                        name: node.name.clone(),
                        rank,
                    });
                }
                if node
                    .attrs
                    .get("auto_pad")
                    .and_then(Json::as_str)
                    .is_some_and(|p| p != "NOTSET")
                {
                    return Err(unsupported(node, "auto_pad is not supported; export explicit pads"));
                }
                let w = self.required(node, 1)?;
                let b = self.operand(node, 2)?;
                let ws = self.shape(w);
                let kernel =
                    attr_ints(node, "kernel_shape").unwrap_or_else(|| ws.iter().skip(2).map(|d| *d as i64).collect());
                let attrs = vec![
                    ("kernel_shape", Attribute::IntArray(kernel)),
                    (
                        "strides",
                        Attribute::IntArray(attr_ints(node, "strides").unwrap_or(vec![1, 1])),
                    ),
                    (
                        "pads",
                        Attribute::IntArray(attr_ints(node, "pads").unwrap_or(vec![0; 4])),
                    ),
                    (
                        "dilations",
                        Attribute::IntArray(attr_ints(node, "dilations").unwrap_or(vec![1, 1])),
                    ),
                    ("group", Attribute::Int(attr_int(node, "group", 1))),
                    ("do_relu", Attribute::Bool(false)),
                    ("relu_limit", Attribute::Float(-1.0)),
                ];
                self.emit(node, OpKind::Conv, vec![x, w, b], attrs)
            }
            "Relu" => {
                let x = self.required(node, 0)?;
                self.emit(
                    node,
                    OpKind::Relu,
                    vec![x],
                    vec![("relu_limit", Attribute::Float(-1.0))],
                )
            }
            "BatchNormalization" => {
                let operands = (0..5).map(|i| self.required(node, i)).collect::<Result<Vec<_>>>()?;
                let eps = attr_float(node, "epsilon", 1e-5);
                self.emit(
                    node,
                    OpKind::BatchNorm,
                    operands,
                    vec![("epsilon", Attribute::Float(eps))],
                )
            }
            "Add" => {
                let a = self.required(node, 0)?;
                let b = self.required(node, 1)?;
                // right-aligned [C,1,1] constants become [1,C,1,1]
                for v in [a, b] {
                    let s = self.shape(v);
                    if self.m.weights.contains_key(self.m.name_of(v)) && s.len() == 3 {
                        let mut t = vec![1];
                        t.extend(s);
                        self.reshape_weight(v, t)?;
                    }
                }
                self.emit(node, OpKind::Add, vec![a, b], vec![])
            }
            "MaxPool" => {
                let x = self.required(node, 0)?;
                let attrs = self.pool_attrs(node)?;
                self.emit(node, OpKind::MaxPool, vec![x], attrs)
            }
            "AveragePool" => {
                let x = self.required(node, 0)?;
                let mut attrs = self.pool_attrs(node)?;
                attrs.push((
                    "count_include_pad",
                    Attribute::Bool(attr_int(node, "count_include_pad", 0) != 0),
                ));
                self.emit(node, OpKind::AvgPool, vec![x], attrs)
            }
            "GlobalAveragePool" => {
                let x = self.required(node, 0)?;
                let s = self.shape(x);
                if s.len() != 4 {
                    return Err(Error::UnsupportedRank {
                        name: node.name.clone(),
                        rank: s.len(),
                    });
                }
                let attrs = vec![
                    ("kernel_shape", Attribute::IntArray(vec![s[2] as i64, s[3] as i64])),
                    ("strides", Attribute::IntArray(vec![1, 1])),
                    ("pads", Attribute::IntArray(vec![0; 4])),
                    ("count_include_pad", Attribute::Bool(false)),
                ];
                self.emit(node, OpKind::AvgPool, vec![x], attrs)
            }
            "Gemm" => {
                if attr_int(node, "transA", 0) != 0 {
                    return Err(unsupported(node, "transA is not supported"));
                }
                if attr_float(node, "alpha", 1.0) != 1.0 || attr_float(node, "beta", 1.0) != 1.0 {
                    return Err(unsupported(node, "alpha and beta must be 1"));
                }
                let x = self.required(node, 0)?;
                let w = self.required(node, 1)?;
                let b = self.operand(node, 2)?;
                if !b.is_none() {
                    let s = self.shape(b);
                    if s.len() == 2 && s[0] == 1 {
                        self.reshape_weight(b, vec![s[1]])?;
                    }
                }
                let attrs = vec![
                    ("right_transpose", Attribute::Bool(attr_int(node, "transB", 0) != 0)),
                    ("do_relu", Attribute::Bool(false)),
                    ("relu_limit", Attribute::Float(-1.0)),
                ];
                self.emit(node, OpKind::MatMul, vec![x, w, b], attrs)
            }
            "MatMul" => {
                let x = self.required(node, 0)?;
                let w = self.required(node, 1)?;
                let attrs = vec![
                    ("right_transpose", Attribute::Bool(false)),
                    ("do_relu", Attribute::Bool(false)),
                    ("relu_limit", Attribute::Float(-1.0)),
                ];
                self.emit(node, OpKind::MatMul, vec![x, w, ValueId::NONE], attrs)
            }
            "Flatten" => {
                let x = self.required(node, 0)?;
                let s = self.shape(x);
                let mut axis = attr_int(node, "axis", 1);
                if axis < 0 {
                    axis += s.len() as i64;
                }
                if axis < 0 || axis as usize > s.len() {
                    return Err(unsupported(node, format!("axis {axis} out of range")));
                }
                let outer: usize = s[..axis as usize].iter().product();
                let inner: usize = s[axis as usize..].iter().product();
                let shape = vec![outer as i64, inner as i64];
                self.emit(
                    node,
                    OpKind::Reshape,
                    vec![x],
                    vec![("shape", Attribute::IntArray(shape))],
                )
            }
            "Reshape" => {
                let x = self.required(node, 0)?;
                let s = self.shape(x);
                let spec = attr_ints(node, "shape").ok_or_else(|| unsupported(node, "shape attribute required"))?;
                // ONNX: 0 copies the input dim
                let spec: Vec<i64> = spec
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        if *d == 0 {
                            s.get(i).map(|v| *v as i64).unwrap_or(0)
                        } else {
                            *d
                        }
                    })
                    .collect();
                self.emit(
                    node,
                    OpKind::Reshape,
                    vec![x],
                    vec![("shape", Attribute::IntArray(spec))],
                )
            }
            "Softmax" => {
                let x = self.required(node, 0)?;
                let axis = attr_int(node, "axis", -1);
                self.emit(node, OpKind::Softmax, vec![x], vec![("axis", Attribute::Int(axis))])
            }
            other => Err(Error::UnsupportedOp {
                name: node.name.clone(),
                op_type: other.to_string(),
            }),
        }
    }
}

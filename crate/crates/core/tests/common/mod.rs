#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tpuc::frontend::{import_graph, InterchangeGraph, Node, TensorSpec};
use tpuc::ir::ModuleIR;
use tpuc::tensor_store::{HostTensor, TensorMap};

pub struct GraphBuilder {
    name: String,
    inputs: Vec<TensorSpec>,
    nodes: Vec<Node>,
    weights: TensorMap,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(name: &str, seed: u64) -> Self {
        GraphBuilder {
            name: name.into(),
            inputs: Vec::new(),
            nodes: Vec::new(),
            weights: TensorMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> &mut Self {
        self.inputs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            dtype: "float32".into(),
        });
        self
    }

    /// Uniform weights in `[-bound, bound]`.
    pub fn weight(&mut self, name: &str, shape: &[usize], bound: f32) -> String {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.weights
            .insert(name.into(), HostTensor::from_f32(name, shape.to_vec(), &v).unwrap());
        name.into()
    }

    pub fn node(&mut self, op: &str, name: &str, inputs: &[&str], attrs: Value) -> String {
        let attrs: BTreeMap<String, Value> = match attrs {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        self.nodes.push(Node {
            op_type: op.into(),
            name: name.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            attrs,
        });
        name.into()
    }

    /// Conv with He-scaled filter and small bias.
    pub fn conv(&mut self, name: &str, x: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> String {
        let bound = (6.0 / (cin * k * k) as f32).sqrt();
        let w = self.weight(&format!("filter_{name}"), &[cout, cin, k, k], bound);
        let b = self.weight(&format!("bias_{name}"), &[cout], 0.1);
        let (k, s, p) = (k as i64, s as i64, p as i64);
        self.node(
            "Conv",
            name,
            &[x, &w, &b],
            json!({"kernel_shape": [k, k], "strides": [s, s], "pads": [p, p, p, p]}),
        )
    }

    pub fn relu(&mut self, name: &str, x: &str) -> String {
        self.node("Relu", name, &[x], json!({}))
    }

    pub fn gemm(&mut self, name: &str, x: &str, k: usize, n: usize) -> String {
        let bound = (6.0 / k as f32).sqrt();
        let w = self.weight(&format!("weight_{name}"), &[n, k], bound);
        let b = self.weight(&format!("bias_{name}"), &[n], 0.1);
        self.node("Gemm", name, &[x, &w, &b], json!({"transB": 1}))
    }

    pub fn finish(&mut self, outputs: &[&str]) -> ModuleIR {
        let g = InterchangeGraph {
            model_name: self.name.clone(),
            inputs: self.inputs.clone(),
            outputs: outputs
                .iter()
                .map(|o| TensorSpec {
                    name: o.to_string(),
                    shape: vec![],
                    dtype: "float32".into(),
                })
                .collect(),
            nodes: self.nodes.clone(),
            weight_names: self.weights.keys().cloned().collect(),
        };
        import_graph(&g, self.weights.clone()).unwrap()
    }

    pub fn graph(&self, outputs: &[&str]) -> (InterchangeGraph, TensorMap) {
        let g = InterchangeGraph {
            model_name: self.name.clone(),
            inputs: self.inputs.clone(),
            outputs: outputs
                .iter()
                .map(|o| TensorSpec {
                    name: o.to_string(),
                    shape: vec![],
                    dtype: "float32".into(),
                })
                .collect(),
            nodes: self.nodes.clone(),
            weight_names: self.weights.keys().cloned().collect(),
        };
        (g, self.weights.clone())
    }
}

/// Random inputs for every module input, uniform in `[-1, 1]`.
pub fn random_inputs(m: &ModuleIR, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TensorMap::new();
    for &v in &m.inputs {
        let shape = m.ty(v).shape.clone();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let name = m.name_of(v).to_string();
        out.insert(name.clone(), HostTensor::from_f32(name, shape, &data).unwrap());
    }
    out
}

/// Single Conv: `[1,32,100,100]` -> `conv1 [1,65,50,50]`, 3x3, stride 2, pad 1.
pub fn listing1_builder() -> GraphBuilder {
    let mut b = GraphBuilder::new("Conv2d", 1);
    b.input("input", &[1, 32, 100, 100]);
    b.conv("conv1", "input", 32, 65, 3, 2, 1);
    b
}

pub fn listing1() -> ModuleIR {
    listing1_builder().finish(&["conv1"])
}

/// Three convs, a max pool and a fully connected layer.
pub fn cnn_builder() -> GraphBuilder {
    let mut b = GraphBuilder::new("SmallCnn", 7);
    b.input("input", &[1, 3, 32, 32]);
    b.conv("conv1", "input", 3, 8, 3, 1, 1);
    b.relu("relu1", "conv1");
    b.conv("conv2", "relu1", 8, 16, 3, 1, 1);
    b.relu("relu2", "conv2");
    b.node(
        "MaxPool",
        "pool1",
        &["relu2"],
        json!({"kernel_shape": [2, 2], "strides": [2, 2]}),
    );
    b.conv("conv3", "pool1", 16, 16, 3, 2, 1);
    b.relu("relu3", "conv3");
    b.node("Flatten", "flat", &["relu3"], json!({"axis": 1}));
    b.gemm("fc", "flat", 16 * 8 * 8, 10);
    b
}

pub fn cnn() -> ModuleIR {
    cnn_builder().finish(&["fc"])
}

/// Residual block with Add, average pooling and a batch of two.
pub fn residual() -> ModuleIR {
    let mut b = GraphBuilder::new("Residual", 11);
    b.input("data", &[2, 8, 20, 20]);
    b.conv("c1", "data", 8, 8, 3, 1, 1);
    b.relu("r1", "c1");
    b.conv("c2", "r1", 8, 8, 3, 1, 1);
    b.node("Add", "sum", &["c2", "data"], json!({}));
    b.relu("r2", "sum");
    b.node(
        "AveragePool",
        "avg",
        &["r2"],
        json!({"kernel_shape": [3, 3], "strides": [2, 2], "pads": [1, 1, 1, 1]}),
    );
    b.finish(&["avg"])
}

/// BatchNorm, global pooling, Gemm and Softmax.
pub fn bn_head() -> ModuleIR {
    let mut b = GraphBuilder::new("BnHead", 13);
    b.input("x", &[1, 4, 16, 16]);
    b.conv("conv", "x", 4, 12, 5, 2, 2);
    let scale = b.weight("bn_scale", &[12], 1.0);
    let bias = b.weight("bn_bias", &[12], 0.2);
    let mean = b.weight("bn_mean", &[12], 0.2);
    // variance must be positive
    let var: Vec<f32> = (0..12).map(|i| 0.5 + 0.1 * i as f32).collect();
    b.weights
        .insert("bn_var".into(), HostTensor::from_f32("bn_var", vec![12], &var).unwrap());
    b.node(
        "BatchNormalization",
        "bn",
        &["conv", &scale, &bias, &mean, "bn_var"],
        json!({"epsilon": 1e-5}),
    );
    b.relu("act", "bn");
    b.node("GlobalAveragePool", "gap", &["act"], json!({}));
    b.node("Flatten", "flat", &["gap"], json!({}));
    b.gemm("logits", "flat", 12, 6);
    b.node("Softmax", "prob", &["logits"], json!({"axis": -1}));
    b.finish(&["prob"])
}

/// Per-channel constant Add, MatMul without bias and two outputs.
pub fn branchy() -> ModuleIR {
    let mut b = GraphBuilder::new("Branchy", 17);
    b.input("img", &[1, 6, 12, 12]);
    b.conv("stem", "img", 6, 6, 1, 1, 0);
    let shift = b.weight("shift", &[6, 1, 1], 0.5);
    b.node("Add", "shifted", &["stem", &shift], json!({}));
    b.relu("act", "shifted");
    b.node(
        "MaxPool",
        "mp",
        &["act"],
        json!({"kernel_shape": [3, 3], "strides": [3, 3]}),
    );
    b.node("Reshape", "rs", &["mp"], json!({"shape": [1, -1]}));
    let w = b.weight("proj", &[6 * 4 * 4, 5], 0.3);
    b.node("MatMul", "head", &["rs", &w], json!({}));
    b.finish(&["head", "mp"])
}

/// Every module of the corpus with a label.
pub fn corpus() -> Vec<(&'static str, ModuleIR)> {
    vec![
        ("listing1", listing1()),
        ("cnn", cnn()),
        ("residual", residual()),
        ("bn_head", bn_head()),
        ("branchy", branchy()),
    ]
}

/// Fixed calibration samples for `m`.
pub fn samples(m: &ModuleIR, n: usize, seed: u64) -> Vec<TensorMap> {
    (0..n).map(|i| random_inputs(m, seed + i as u64)).collect()
}

/// A random small CNN: a chain of 1..=6 ops over a `[n,c,h,w]` input with
/// occasional residual Adds, optionally ending in Flatten + Gemm (+ Softmax).
pub fn random_graph(seed: u64) -> ModuleIR {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut b = GraphBuilder::new("Random", seed);
    let (n, mut c, mut h, mut w) = (
        rng.gen_range(1..=2usize),
        rng.gen_range(1..=6usize),
        rng.gen_range(4..=12usize),
        rng.gen_range(4..=12usize),
    );
    b.input("in", &[n, c, h, w]);
    let mut cur = "in".to_string();
    // same-shaped earlier values, for residual adds
    let mut seen: Vec<(String, [usize; 3])> = vec![(cur.clone(), [c, h, w])];
    let steps = rng.gen_range(1..=6);
    for i in 0..steps {
        let name = format!("v{i}");
        match rng.gen_range(0..7) {
            0 | 1 => {
                let co = rng.gen_range(1..=6usize);
                let k = [1usize, 3][rng.gen_range(0..2)];
                let s = if h >= 4 && w >= 4 { rng.gen_range(1..=2) } else { 1 };
                let p = if rng.gen_bool(0.7) { k / 2 } else { 0 };
                if (h + 2 * p) < k || (w + 2 * p) < k {
                    continue;
                }
                b.conv(&name, &cur, c, co, k, s, p);
                c = co;
                h = (h + 2 * p - k) / s + 1;
                w = (w + 2 * p - k) / s + 1;
            }
            2 => {
                b.relu(&name, &cur);
            }
            3 => {
                let scale = b.weight(&format!("{name}_g"), &[c], 1.0);
                let beta = b.weight(&format!("{name}_b"), &[c], 0.3);
                let mean = b.weight(&format!("{name}_m"), &[c], 0.3);
                let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.2f32..2.0)).collect();
                let vname = format!("{name}_v");
                b.weights
                    .insert(vname.clone(), HostTensor::from_f32(&vname, vec![c], &var).unwrap());
                b.node(
                    "BatchNormalization",
                    &name,
                    &[&cur, &scale, &beta, &mean, &vname],
                    json!({"epsilon": 1e-5}),
                );
            }
            4 => {
                if h < 2 || w < 2 {
                    continue;
                }
                b.node(
                    "MaxPool",
                    &name,
                    &[&cur],
                    json!({"kernel_shape": [2, 2], "strides": [2, 2]}),
                );
                h /= 2;
                w /= 2;
            }
            5 => {
                let cip = rng.gen_bool(0.5) as i64;
                b.node(
                    "AveragePool",
                    &name,
                    &[&cur],
                    json!({"kernel_shape": [3, 3], "strides": [1, 1], "pads": [1, 1, 1, 1], "count_include_pad": cip}),
                );
            }
            _ => {
                let same: Vec<&String> = seen
                    .iter()
                    .filter(|(v, s)| *s == [c, h, w] && *v != cur)
                    .map(|(v, _)| v)
                    .collect();
                let other = if same.is_empty() || rng.gen_bool(0.3) {
                    b.weight(&format!("{name}_k"), &[c, 1, 1], 0.5)
                } else {
                    same[rng.gen_range(0..same.len())].clone()
                };
                b.node("Add", &name, &[&cur, &other], json!({}));
            }
        }
        cur = name;
        seen.push((cur.clone(), [c, h, w]));
    }
    if cur == "in" {
        b.relu("act", "in");
        cur = "act".into();
    }
    let mut outs = vec![cur.clone()];
    if rng.gen_bool(0.4) {
        b.node("Flatten", "flat", &[&cur], json!({"axis": 1}));
        let classes = rng.gen_range(2..=5);
        b.gemm("fc", "flat", c * h * w, classes);
        outs = vec!["fc".into()];
        if rng.gen_bool(0.5) {
            b.node("Softmax", "prob", &["fc"], json!({"axis": 1}));
            outs = vec!["prob".into()];
        }
    }
    let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
    b.finish(&refs)
}

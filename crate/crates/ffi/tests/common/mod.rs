#![allow(dead_code)]

use std::ffi::CString;
use std::path::Path;

use serde_json::json;
use tpuc::tensor_store::{npz_write, HostTensor, TensorMap};

pub fn c(s: impl AsRef<str>) -> CString {
    CString::new(s.as_ref()).unwrap()
}

pub fn p(path: &Path) -> CString {
    c(path.to_str().unwrap())
}

pub fn det(n: usize, phase: f32, scale: f32) -> Vec<f32> {
    (0..n).map(|i| ((i as f32) * 0.37 + phase).sin() * scale).collect()
}

/// conv 3x3 -> relu -> maxpool -> flatten -> gemm, written as JSON + NPZ.
pub fn write_model(dir: &Path) -> (CString, CString) {
    let graph = json!({
        "model_name": "tiny",
        "inputs": [{"name": "x", "shape": [1, 3, 8, 8], "dtype": "float32"}],
        "outputs": [{"name": "fc", "shape": [], "dtype": "float32"}],
        "nodes": [
            {"op_type": "Conv", "name": "conv", "inputs": ["x", "w", "b"],
             "attrs": {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1]}},
            {"op_type": "Relu", "name": "relu", "inputs": ["conv"]},
            {"op_type": "MaxPool", "name": "pool", "inputs": ["relu"],
             "attrs": {"kernel_shape": [2, 2], "strides": [2, 2]}},
            {"op_type": "Flatten", "name": "flat", "inputs": ["pool"], "attrs": {"axis": 1}},
            {"op_type": "Gemm", "name": "fc", "inputs": ["flat", "fw", "fb"], "attrs": {"transB": 1}}
        ],
        "weight_names": ["w", "b", "fw", "fb"]
    });
    let mut w = TensorMap::new();
    for (name, shape, phase, scale) in [
        ("w", vec![4, 3, 3, 3], 0.1, 0.4),
        ("b", vec![4], 0.7, 0.1),
        ("fw", vec![5, 64], 1.3, 0.3),
        ("fb", vec![5], 2.1, 0.1),
    ] {
        let n = shape.iter().product();
        w.insert(
            name.into(),
            HostTensor::from_f32(name, shape, &det(n, phase, scale)).unwrap(),
        );
    }
    let (g, npz) = (dir.join("tiny.json"), dir.join("tiny.npz"));
    std::fs::write(&g, graph.to_string()).unwrap();
    npz_write(&npz, &w).unwrap();
    (p(&g), p(&npz))
}

mod common;

use std::path::Path;
use std::process::{Command, Output};

use tpuc::tensor_store::npz_write;

fn tpuc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpuc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("tpuc runs")
}

fn write_graph(dir: &Path, b: &common::GraphBuilder, outputs: &[&str]) {
    let (g, w) = b.graph(outputs);
    std::fs::write(dir.join("net.json"), g.to_json()).unwrap();
    npz_write(dir.join("net.npz"), &w).unwrap();
}

#[test]
fn f32_listing1_end_to_end_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_graph(d, &common::listing1_builder(), &["conv1"]);
    let m = common::listing1();
    npz_write(d.join("in.npz"), &common::random_inputs(&m, 3)).unwrap();

    let o = tpuc(
        &[
            "convert",
            "--graph",
            "net.json",
            "--weights",
            "net.npz",
            "-o",
            "net.tmir",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("net_weight.npz").exists());
    let o = tpuc(
        &[
            "deploy",
            "--module",
            "net.tmir",
            "--mode",
            "F32",
            "-o",
            "net.tpm",
            "--input",
            "in.npz",
            "--dump-top",
            "top.npz",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = tpuc(
        &[
            "run",
            "--model",
            "net.tpm",
            "--input",
            "in.npz",
            "--output",
            "out.npz",
            "--trace",
            "trace.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(d.join("trace.txt")).unwrap();
    assert!(trace.lines().last().unwrap().contains("END"));
    let o = tpuc(&["compare", "top.npz", "out.npz", "--mode", "F32"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn int8_without_calibration_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_graph(d, &common::cnn_builder(), &["fc"]);
    assert!(tpuc(
        &[
            "convert",
            "--graph",
            "net.json",
            "--weights",
            "net.npz",
            "-o",
            "net.tmir"
        ],
        d
    )
    .status
    .success());
    let o = tpuc(
        &["deploy", "--module", "net.tmir", "--mode", "INT8", "-o", "net.tpm"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires a calibrated module"));
    assert!(!d.join("net.tpm").exists());
}

#[test]
fn int8_calibrate_deploy_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_graph(d, &common::cnn_builder(), &["fc"]);
    let m = common::cnn();
    std::fs::create_dir(d.join("samples")).unwrap();
    for (i, s) in common::samples(&m, 16, 40).iter().enumerate() {
        npz_write(d.join(format!("samples/{i:02}.npz")), s).unwrap();
    }
    npz_write(d.join("in.npz"), &common::random_inputs(&m, 99)).unwrap();
    let steps: [&[&str]; 4] = [
        &[
            "convert",
            "--graph",
            "net.json",
            "--weights",
            "net.npz",
            "-o",
            "net.tmir",
        ],
        &[
            "calibrate",
            "--module",
            "net.tmir",
            "--dataset",
            "samples",
            "--method",
            "kl",
            "-o",
            "net.calib",
        ],
        &[
            "deploy",
            "--module",
            "net.tmir",
            "--calib",
            "net.calib",
            "--mode",
            "INT8",
            "--asymmetric",
            "--chip",
            "virt32-64k",
            "-o",
            "net.tpm",
            "--input",
            "in.npz",
            "--dump-top",
            "top.npz",
            "--dump-tpu",
            "tpu.npz",
        ],
        &["run", "--model", "net.tpm", "--input", "in.npz", "--output", "out.npz"],
    ];
    for s in steps {
        let o = tpuc(s, d);
        assert!(o.status.success(), "{s:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(std::fs::read_to_string(d.join("net.calib"))
        .unwrap()
        .starts_with("# tpuc-calibration-v1"));
    let o = tpuc(&["compare", "top.npz", "tpu.npz", "--mode", "INT8"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = tpuc(&["compare", "top.npz", "out.npz", "--mode", "INT8", "--json"], d);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);

    // an unreachable cosine bound fails and names the tensor
    let o = tpuc(&["compare", "top.npz", "out.npz", "--cos", "0.9999999"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst tensor `fc`"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = tpuc(
        &["run", "--model", "missing.tpm", "--input", "x.npz", "--output", "y.npz"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(d.join("junk.tpm"), b"not a program").unwrap();
    npz_write(d.join("x.npz"), &Default::default()).unwrap();
    let o = tpuc(
        &["run", "--model", "junk.tpm", "--input", "x.npz", "--output", "y.npz"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad program file"));
}

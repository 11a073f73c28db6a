mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tpuc::error::Error;
use tpuc::ir::{serialize_module, AttrMapExt, ModuleIR, ModuleState, OpKind, QuantAnnotation};
use tpuc::tensor_store::{HostTensor, TensorMap};
use tpuc::top::top_inference;
use tpuc::transforms::{
    apply_calibration, calibrate, canonicalize, collect_stats, format_calib_table, kl_divergence_at, parse_calib_table,
    search_threshold, ActivationStats, CalibEntry, CalibMethod, CalibTable, HIST_BINS, QUANT_LEVELS, THRESHOLD_FLOOR,
};

fn close(a: &[f32], b: &[f32], rel: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| ((*x as f64) - (*y as f64)).abs() <= rel * (1.0 + (*y as f64).abs()))
}

fn outputs_match(m: &ModuleIR, c: &ModuleIR, x: &TensorMap, rel: f64) {
    let a = top_inference(m, x).unwrap();
    let b = top_inference(c, x).unwrap();
    for &o in &m.outputs {
        let name = m.name_of(o);
        let (u, v) = (a[name].to_f32_vec().unwrap(), b[name].to_f32_vec().unwrap());
        assert!(close(&v, &u, rel), "{name}");
    }
}

fn entry(t: f64, lo: f64, hi: f64) -> CalibEntry {
    CalibEntry {
        threshold: t,
        min: lo,
        max: hi,
    }
}

#[test]
fn conv_relu_fuses() {
    let m = common::cnn();
    let c = canonicalize(&m).unwrap();
    assert!(c.ops.iter().all(|op| op.kind() != OpKind::Relu));
    let convs: Vec<_> = c.ops.iter().filter(|op| op.kind() == OpKind::Conv).collect();
    assert_eq!(convs.len(), 3);
    assert!(convs.iter().all(|op| op.attrs.bool_or("do_relu", false)));
    // the fused value takes the relu's name
    assert!(c.find_value("relu1").is_some() && c.find_value("conv1").is_none());
    let x = common::random_inputs(&m, 1);
    assert_eq!(
        top_inference(&m, &x).unwrap()["fc"],
        top_inference(&c, &x).unwrap()["fc"]
    );
}

#[test]
fn relu_with_two_users_is_kept() {
    let mut b = common::GraphBuilder::new("two", 1);
    b.input("x", &[1, 2, 5, 5]);
    b.conv("c", "x", 2, 2, 3, 1, 1);
    b.relu("r", "c");
    b.node("Add", "s", &["c", "r"], json!({}));
    let m = b.finish(&["s"]);
    let c = canonicalize(&m).unwrap();
    assert!(c.ops.iter().any(|op| op.kind() == OpKind::Relu));
}

fn bn_module(c: usize, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f64) -> ModuleIR {
    let mut b = common::GraphBuilder::new("bn", 3);
    b.input("x", &[2, c, 4, 4]);
    b.node(
        "BatchNormalization",
        "bn",
        &["x", "g", "b", "m", "v"],
        json!({"epsilon": eps}),
    );
    let (g, mut w) = b.graph(&["bn"]);
    for (n, v) in [("g", gamma), ("b", beta), ("m", mean), ("v", var)] {
        w.insert(n.into(), HostTensor::from_f32(n, vec![c], v).unwrap());
    }
    let mut g = g;
    g.weight_names = w.keys().cloned().collect();
    tpuc::frontend::import_graph(&g, w).unwrap()
}

#[test]
fn identity_batchnorm_folds_to_identity() {
    let m = bn_module(3, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], 0.0);
    let c = canonicalize(&m).unwrap();
    assert!(c.ops.iter().all(|op| op.kind() != OpKind::BatchNorm));
    let conv = c.ops.iter().find(|op| op.kind() == OpKind::Conv).unwrap();
    assert_eq!(conv.attrs.int("group"), Some(3));
    assert!(c.weights.contains_key("bn_filter") && c.weights.contains_key("bn_bias"));
    let x = common::random_inputs(&m, 2);
    assert_eq!(top_inference(&c, &x).unwrap()["bn"].data, x["x"].data);
}

#[test]
fn batchnorm_fold_names_avoid_collisions() {
    // bn_head already owns a weight called bn_bias
    let m = common::bn_head();
    let c = canonicalize(&m).unwrap();
    assert!(c.weights.keys().any(|k| k.starts_with("bn_bias") && k != "bn_bias"));
    tpuc::ir::verify_module(&c).unwrap();
}

#[test]
fn canonicalize_is_a_fixpoint_and_rejects_calibrated_modules() {
    for (_, m) in common::corpus() {
        let c = canonicalize(&m).unwrap();
        assert_eq!(serialize_module(&canonicalize(&c).unwrap()), serialize_module(&c));
    }
    let m = common::cnn();
    let t = calibrate(&m, &common::samples(&m, 1, 0), CalibMethod::MinMax).unwrap();
    let cal = apply_calibration(&m, &t, true).unwrap();
    assert!(matches!(canonicalize(&cal), Err(Error::WrongState { .. })));
}

#[test]
fn reshape_chains_collapse() {
    let mut b = common::GraphBuilder::new("rs", 1);
    b.input("x", &[2, 3, 4, 4]);
    b.node("Reshape", "a", &["x"], json!({"shape": [2, 48]}));
    b.node("Reshape", "b", &["a"], json!({"shape": [6, 16]}));
    b.node("Reshape", "c", &["b"], json!({"shape": [96]}));
    let m = b.finish(&["c"]);
    let c = canonicalize(&m).unwrap();
    assert_eq!(c.ops.iter().filter(|op| op.kind() == OpKind::Reshape).count(), 1);
    let x = common::random_inputs(&m, 1);
    assert_eq!(top_inference(&c, &x).unwrap()["c"], top_inference(&m, &x).unwrap()["c"]);
}

#[test]
fn random_graphs_keep_their_outputs() {
    for seed in 0..100 {
        let m = common::random_graph(seed);
        let c = canonicalize(&m).unwrap();
        assert!(c.ops.iter().all(|op| op.kind() != OpKind::BatchNorm));
        outputs_match(&m, &c, &common::random_inputs(&m, seed), 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibration_table_round_trips(t in 1e-6f64..1e4, lo in -1e4f64..0.0, hi in 0.0f64..1e4) {
        let mut table = CalibTable::new();
        table.insert("v".into(), entry(t, lo, hi));
        let text = format_calib_table(&table);
        prop_assert_eq!(parse_calib_table(&text).unwrap(), table);
        for field in text.lines().nth(1).unwrap().split(' ').skip(1) {
            let mantissa = field.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            prop_assert!(mantissa.len() >= 6, "{}", field);
        }
    }

    #[test]
    fn batchnorm_fold_is_equivalent(seed in 0u64..10_000, c in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f32, hi: f32| -> Vec<f32> { (0..c).map(|_| rng.gen_range(lo..hi)).collect() };
        let (g, b, mean, var) = (draw(-2.0, 2.0), draw(-1.0, 1.0), draw(-1.0, 1.0), draw(0.05, 3.0));
        let m = bn_module(c, &g, &b, &mean, &var, 1e-5);
        let canon = canonicalize(&m).unwrap();
        outputs_match(&m, &canon, &common::random_inputs(&m, seed), 1e-5);
    }
}

#[test]
fn zero_activations_get_the_floor() {
    let s = ActivationStats::from_values(&[0.0; 64], 0.0);
    assert_eq!(s.abs_max, 0.0);
    for method in [CalibMethod::MinMax, CalibMethod::Kl, CalibMethod::Percentile(0.99)] {
        assert_eq!(search_threshold(&s, method), THRESHOLD_FLOOR);
    }
}

fn gaussian_like(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // sum of uniforms, roughly normal
    (0..n)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).sum::<f32>() * 0.7)
        .collect()
}

#[test]
fn minmax_threshold_is_abs_max() {
    let mut v = gaussian_like(4000, 1);
    v.push(-4.178);
    v.push(4.493);
    let s = ActivationStats::from_values(&v, 4.493);
    assert_eq!(s.min, -4.178f32 as f64);
    assert_eq!(s.max, 4.493f32 as f64);
    assert_eq!(search_threshold(&s, CalibMethod::MinMax), 4.493);
    let total: u64 = s.hist.iter().sum();
    assert_eq!(total as usize, v.len());
}

#[test]
fn threshold_methods_are_ordered() {
    for seed in 0..8 {
        let v = gaussian_like(20_000, seed);
        let abs_max = v.iter().fold(0f64, |a, x| a.max(x.abs() as f64));
        let s = ActivationStats::from_values(&v, abs_max);
        let minmax = search_threshold(&s, CalibMethod::MinMax);
        let p99 = search_threshold(&s, CalibMethod::Percentile(0.99));
        let p100 = search_threshold(&s, CalibMethod::Percentile(1.0));
        let kl = search_threshold(&s, CalibMethod::Kl);
        assert!((p100 - minmax).abs() <= s.bin_width(), "{p100} {minmax}");
        assert!(minmax >= p99);
        assert!(kl <= abs_max && kl >= p99, "kl {kl} p99 {p99} max {abs_max}");
        assert!(kl >= (QUANT_LEVELS as f64 + 0.5) * s.bin_width() - 1e-12);
    }
}

/// KL(P||Q) written out level by level.
fn kl_oracle(hist: &[u64], i: usize) -> f64 {
    let outliers: u64 = hist[i..].iter().sum();
    let mut p: Vec<f64> = hist[..i].iter().map(|c| *c as f64).collect();
    p[i - 1] += outliers as f64;
    let per = i / QUANT_LEVELS;
    let level = |j: usize| (j / per).min(QUANT_LEVELS - 1);
    let mut mass = vec![0f64; QUANT_LEVELS];
    let mut support = vec![0usize; QUANT_LEVELS];
    for j in 0..i {
        mass[level(j)] += hist[j] as f64;
        if p[j] > 0.0 {
            support[level(j)] += 1;
        }
    }
    let q: Vec<f64> = (0..i)
        .map(|j| {
            if p[j] > 0.0 {
                mass[level(j)] / support[level(j)] as f64
            } else {
                0.0
            }
        })
        .collect();
    let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let mut kl = 0.0;
    for j in 0..i {
        if p[j] > 0.0 {
            if q[j] == 0.0 {
                return f64::INFINITY;
            }
            kl += p[j] / ps * ((p[j] / ps) / (q[j] / qs)).ln();
        }
    }
    kl
}

#[test]
fn kl_divergence_matches_oracle() {
    for seed in 0..4 {
        let v = gaussian_like(50_000, seed);
        let abs_max = v.iter().fold(0f64, |a, x| a.max(x.abs() as f64));
        let s = ActivationStats::from_values(&v, abs_max);
        for i in [128, 129, 200, 255, 256, 511, 777, 1024, 2047, 2048] {
            let (a, b) = (kl_divergence_at(&s.hist, i), kl_oracle(&s.hist, i));
            assert!(a == b || (a - b).abs() <= 1e-9 * (1.0 + b.abs()), "i={i}: {a} vs {b}");
        }
    }
    // a histogram that already fits 128 levels loses nothing
    let mut h = vec![0u64; HIST_BINS];
    h[..128].iter_mut().for_each(|c| *c = 10);
    assert!(kl_divergence_at(&h, 128).abs() < 1e-12);
}

#[test]
fn stats_over_two_samples_equal_stats_over_their_union() {
    let m = common::cnn();
    let s = common::samples(&m, 2, 30);
    let stats = collect_stats(&m, &s).unwrap();
    let a = top_inference(&m, &s[0]).unwrap();
    let b = top_inference(&m, &s[1]).unwrap();
    for (name, st) in &stats {
        let mut all = a[name].to_f32_vec().unwrap();
        all.extend(b[name].to_f32_vec().unwrap());
        let abs_max = all.iter().fold(0f64, |acc, x| acc.max(x.abs() as f64));
        assert_eq!(*st, ActivationStats::from_values(&all, abs_max), "{name}");
    }
    assert!(!stats.contains_key("filter_conv1"));
    assert!(matches!(collect_stats(&m, &[]), Err(Error::NoSamples)));

    // merge agrees when ranges match, refuses otherwise
    let x = ActivationStats::from_values(&[1.0, -2.0], 2.0);
    let y = ActivationStats::from_values(&[0.5], 2.0);
    assert_eq!(
        x.merge(&y).unwrap(),
        ActivationStats::from_values(&[1.0, -2.0, 0.5], 2.0)
    );
    assert!(x.merge(&ActivationStats::from_values(&[0.5], 1.0)).is_none());
}

#[test]
fn non_finite_activations_are_reported() {
    let m = common::cnn();
    let mut x = common::random_inputs(&m, 0);
    let mut v = x["input"].to_f32_vec().unwrap();
    v[0] = f32::INFINITY;
    x.insert(
        "input".into(),
        HostTensor::from_f32("input", vec![1, 3, 32, 32], &v).unwrap(),
    );
    assert!(matches!(collect_stats(&m, &[x]), Err(Error::NonFiniteActivation(_))));
}

#[test]
fn calibration_table_text() {
    let mut t = CalibTable::new();
    t.insert("conv1".into(), entry(4.30, -4.178, 4.493));
    t.insert("input".into(), entry(1.0, -1.0, 0.99));
    let text = format_calib_table(&t);
    assert_eq!(
        text,
        "# tpuc-calibration-v1\nconv1 4.30000e0 -4.17800e0 4.49300e0\ninput 1.00000e0 -1.00000e0 9.90000e-1\n"
    );
    assert_eq!(parse_calib_table(&text).unwrap(), t);
    assert!(parse_calib_table("# tpuc-calibration-v1\n").unwrap().is_empty());

    let bad = [
        ("conv1 4.3 -4.178 4.493\n", 1),
        ("# tpuc-calibration-v1\nconv1 4.3 -4.178\n", 2),
        ("# tpuc-calibration-v1\n\nconv1 x -4.178 4.493\n", 3),
        ("# tpuc-calibration-v1\nconv1 -1 -4.178 4.493\n", 2),
        ("# tpuc-calibration-v1\nconv1 1 2 1\n", 2),
        ("# tpuc-calibration-v1\na 1 0 1\na 1 0 1\n", 3),
    ];
    for (text, line) in bad {
        match parse_calib_table(text) {
            Err(Error::CalibParse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            r => panic!("{text:?}: {r:?}"),
        }
    }
    assert_eq!(
        "percentile:0.999".parse::<CalibMethod>(),
        Ok(CalibMethod::Percentile(0.999))
    );
    assert!("histogram".parse::<CalibMethod>().is_err());
}

fn listing1_table() -> CalibTable {
    let mut t = CalibTable::new();
    t.insert("conv1".into(), entry(4.30, -4.178, 4.493));
    t.insert("input".into(), entry(1.0, -1.0, 1.0));
    t
}

#[test]
fn calibration_annotates_activations() {
    let m = common::listing1();
    let conv1 = m.find_value("conv1").unwrap();

    let asym = apply_calibration(&m, &listing1_table(), false).unwrap();
    assert_eq!(asym.state, ModuleState::TopCalibrated);
    assert!(asym.asymmetric);
    assert_eq!(
        asym.ty(conv1).quant,
        QuantAnnotation::Calibrated {
            min: -4.178,
            max: 4.493
        }
    );

    let sym = apply_calibration(&m, &listing1_table(), true).unwrap();
    assert_eq!(
        sym.ty(conv1).quant,
        QuantAnnotation::Calibrated { min: -4.30, max: 4.30 }
    );
    // weights stay unannotated
    let w = sym.find_value("filter_conv1").unwrap();
    assert!(sym.ty(w).quant.is_none());
    tpuc::ir::verify_module(&sym).unwrap();

    let mut t = listing1_table();
    t.remove("conv1");
    assert!(matches!(apply_calibration(&m, &t, true), Err(Error::MissingCalibration(n)) if n == "conv1"));
    assert!(matches!(
        apply_calibration(&sym, &listing1_table(), true),
        Err(Error::WrongState { .. })
    ));
}

#[test]
fn asymmetric_ranges_contain_zero() {
    let mut b = common::GraphBuilder::new("pos", 1);
    b.input("x", &[1, 1, 2, 2]);
    b.relu("r", "x");
    let m = b.finish(&["r"]);
    let mut t = CalibTable::new();
    t.insert("x".into(), entry(1.0, -1.0, 1.0));
    t.insert("r".into(), entry(0.8, 0.2, 0.9));
    let c = apply_calibration(&m, &t, false).unwrap();
    let r = c.find_value("r").unwrap();
    assert_eq!(c.ty(r).quant, QuantAnnotation::Calibrated { min: 0.0, max: 0.9 });
}

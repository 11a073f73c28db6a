mod common;

use tpuc::ir::{ChipConfig, Mode};
use tpuc::pipeline::{deploy, DeployOptions};
use tpuc::sim::run_program;
use tpuc::top::top_inference;
use tpuc::tpu::tpu_inference;
use tpuc::transforms::{calibrate, CalibMethod};
use tpuc::verify::{compare_stages, Thresholds};

fn options(m: &tpuc::ir::ModuleIR, mode: Mode, asym: bool, chip: ChipConfig) -> DeployOptions {
    let mut o = DeployOptions::new(mode);
    o.chip = chip;
    o.asymmetric = asym;
    if mode == Mode::Int8 {
        let s = common::samples(m, 4, 100);
        o.calib = Some(calibrate(m, &s, CalibMethod::Kl).unwrap());
    }
    o
}

#[test]
fn every_mode_matches_between_dialect_and_simulator() {
    for (label, m) in common::corpus() {
        if label == "listing1" {
            continue;
        }
        let x = common::random_inputs(&m, 5);
        for mode in Mode::ALL {
            for asym in [false, true] {
                if asym && mode != Mode::Int8 {
                    continue;
                }
                let d = deploy(&m, &options(&m, mode, asym, ChipConfig::default())).unwrap();
                let top = top_inference(&d.top, &x).unwrap();
                let lowered = tpu_inference(&d.lowered, &x).unwrap();
                let grouped = tpu_inference(&d.grouped, &x).unwrap();
                let sim = run_program(&d.program, &x).unwrap();
                for (name, t) in &sim {
                    let a = &lowered[name];
                    assert_eq!(
                        a.to_f32_vec().unwrap(),
                        t.to_f32_vec().unwrap(),
                        "{label} {mode} {name}"
                    );
                    assert_eq!(grouped[name].data, a.data, "{label} {mode} grouped {name}");
                }
                let r = compare_stages(&top, &sim, Thresholds::for_mode(mode)).unwrap();
                assert!(r.pass, "{label} {mode} asym={asym}\n{}", r.to_text());
            }
        }
    }
}

//! The deploy pipeline: canonicalize, calibrate (INT8 only), lower, group,
//! assign addresses and emit a program.

use crate::backend::{assign_addresses, codegen, layer_group, TpuProgram};
use crate::error::Result;
use crate::ir::{ChipConfig, Mode, ModuleIR, ModuleState};
use crate::lowering::{lower_module, LoweringOptions};
use crate::transforms::{apply_calibration, canonicalize, CalibTable};

#[derive(Debug, Clone)]
pub struct DeployOptions {
    pub mode: Mode,
    pub chip: ChipConfig,
    pub asymmetric: bool,
    pub calib: Option<CalibTable>,
    /// Skip layer grouping; every op runs globally from DDR.
    pub no_group: bool,
}

impl DeployOptions {
    pub fn new(mode: Mode) -> Self {
        DeployOptions {
            mode,
            chip: ChipConfig::default(),
            asymmetric: false,
            calib: None,
            no_group: false,
        }
    }
}

/// Every intermediate module of one deploy run.
#[derive(Debug, Clone)]
pub struct Deployed {
    /// Canonicalized TOP module, calibrated when the mode is INT8.
    pub top: ModuleIR,
    pub lowered: ModuleIR,
    pub grouped: ModuleIR,
    pub addressed: ModuleIR,
    pub program: TpuProgram,
}

pub fn deploy(m: &ModuleIR, opts: &DeployOptions) -> Result<Deployed> {
    let mut top = if m.state == ModuleState::TopF32 {
        canonicalize(m)?
    } else {
        m.clone()
    };
    if opts.mode == Mode::Int8 && top.state == ModuleState::TopF32 {
        if let Some(t) = &opts.calib {
            top = apply_calibration(&top, t, !opts.asymmetric)?;
        }
    }
    let lopts = LoweringOptions {
        mode: opts.mode,
        chip: opts.chip.name.clone(),
        asymmetric: opts.asymmetric,
    };
    let lowered = lower_module(&top, &lopts)?;
    let grouped = if opts.no_group {
        lowered.clone()
    } else {
        layer_group(&lowered, &opts.chip)?
    };
    let addressed = assign_addresses(&grouped, &opts.chip)?;
    let program = codegen(&addressed, &opts.chip)?;
    Ok(Deployed {
        top,
        lowered,
        grouped,
        addressed,
        program,
    })
}

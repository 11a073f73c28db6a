use crate::error::{Error, Result};

use super::module::Mode;

/// Virtual accelerator parameters. All sizes are bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipConfig {
    pub name: String,
    /// Per-lane local memory.
    pub lmem_bytes: u64,
    pub npu_num: u64,
    pub eu_bytes: u64,
    pub ddr_start: u64,
    pub ddr_bytes: u64,
    pub align_bytes: u64,
    pub modes: Vec<Mode>,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig {
            name: "virt32".into(),
            lmem_bytes: 262_144,
            npu_num: 32,
            eu_bytes: 16,
            ddr_start: 4_294_967_296,
            ddr_bytes: 67_108_864,
            align_bytes: 64,
            modes: Mode::ALL.to_vec(),
        }
    }
}

impl ChipConfig {
    /// Known chips: `virt32` (256 KiB lanes), `virt32-64k`, `virt32-4k`, and
    /// `virt8`, a small 8-lane part without F16/BF16 support.
    pub fn by_name(name: &str) -> Result<ChipConfig> {
        let base = ChipConfig::default();
        let chip = match name {
            "virt32" => base,
            "virt32-64k" => ChipConfig {
                name: name.into(),
                lmem_bytes: 65_536,
                ..base
            },
            "virt32-4k" => ChipConfig {
                name: name.into(),
                lmem_bytes: 4_096,
                ..base
            },
            "virt8" => ChipConfig {
                name: name.into(),
                lmem_bytes: 65_536,
                npu_num: 8,
                modes: vec![Mode::Int8, Mode::F32],
                ..base
            },
            other => return Err(Error::UnknownChip(other.to_string())),
        };
        Ok(chip)
    }

    pub fn with_lmem_bytes(mut self, bytes: u64) -> Self {
        self.lmem_bytes = bytes;
        self
    }

    pub fn supports(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    pub fn ddr_end(&self) -> u64 {
        self.ddr_start + self.ddr_bytes
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: u64| v.is_power_of_two();
        let ok = pow2(self.lmem_bytes)
            && pow2(self.npu_num)
            && pow2(self.eu_bytes)
            && pow2(self.ddr_start)
            && pow2(self.ddr_bytes)
            && pow2(self.align_bytes)
            && self.lmem_bytes >= 4096
            && self.name.len() <= 16;
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownChip(format!("{} has invalid parameters", self.name)))
        }
    }
}

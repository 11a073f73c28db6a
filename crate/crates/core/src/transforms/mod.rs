//! Device-independent rewrites and calibration.

mod calib;
mod canon;

pub use calib::{
    apply_calibration, build_calib_table, calibrate, calibrated_range, collect_stats, format_calib_table,
    kl_divergence_at, parse_calib_table, read_calib_table, search_threshold, write_calib_table, ActivationStats,
    CalibEntry, CalibMethod, CalibTable, CALIB_HEADER, HIST_BINS, QUANT_LEVELS, THRESHOLD_FLOOR,
};
pub use canon::canonicalize;

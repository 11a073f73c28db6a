use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ir::{ModuleIR, ModuleState, QuantAnnotation};
use crate::numeric::fmt_sig6;
use crate::tensor_store::TensorMap;
use crate::top::top_inference;

pub const HIST_BINS: usize = 2048;
pub const QUANT_LEVELS: usize = 128;
pub const THRESHOLD_FLOOR: f64 = 1e-5;
pub const CALIB_HEADER: &str = "# tpuc-calibration-v1";

/// Running statistics of one tensor across calibration samples. The
/// histogram counts `|x|` over `[0, abs_max]` in [`HIST_BINS`] bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub min: f64,
    pub max: f64,
    pub abs_max: f64,
    pub hist: Vec<u64>,
}

impl ActivationStats {
    pub fn bin_width(&self) -> f64 {
        self.abs_max / HIST_BINS as f64
    }

    fn range_of(values: &[f32]) -> (f64, f64) {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
    }

    /// Stats of `values` binned over a fixed `abs_max`.
    pub fn from_values(values: &[f32], abs_max: f64) -> Self {
        let (min, max) = Self::range_of(values);
        let mut s = ActivationStats {
            min,
            max,
            abs_max,
            hist: vec![0; HIST_BINS],
        };
        s.add_histogram(values);
        s
    }

    fn add_histogram(&mut self, values: &[f32]) {
        if self.abs_max <= 0.0 {
            return;
        }
        let scale = HIST_BINS as f64 / self.abs_max;
        for &v in values {
            let bin = ((v.abs() as f64 * scale) as usize).min(HIST_BINS - 1);
            self.hist[bin] += 1;
        }
    }

    /// Combine stats binned over the same range. Returns `None` when the
    /// ranges differ, since re-binning would not be exact.
    pub fn merge(&self, other: &ActivationStats) -> Option<ActivationStats> {
        if self.abs_max != other.abs_max {
            return None;
        }
        Some(ActivationStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            abs_max: self.abs_max,
            hist: self.hist.iter().zip(&other.hist).map(|(a, b)| a + b).collect(),
        })
    }
}

fn activations(m: &ModuleIR, sample: &TensorMap) -> Result<TensorMap> {
    let acts = top_inference(m, sample)?;
    for (name, t) in &acts {
        if t.to_f32_vec()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation(name.clone()));
        }
    }
    Ok(acts)
}

/// Two passes over the samples: global ranges first, then histograms over
/// those ranges. Keys are value names; weights are excluded.
pub fn collect_stats(m: &ModuleIR, samples: &[TensorMap]) -> Result<BTreeMap<String, ActivationStats>> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for s in samples {
        for (name, t) in activations(m, s)? {
            let (lo, hi) = ActivationStats::range_of(&t.to_f32_vec()?);
            let e = ranges.entry(name).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
    let mut stats: BTreeMap<String, ActivationStats> = ranges
        .iter()
        .map(|(name, &(min, max))| {
            let abs_max = min.abs().max(max.abs());
            (
                name.clone(),
                ActivationStats {
                    min,
                    max,
                    abs_max,
                    hist: vec![0; HIST_BINS],
                },
            )
        })
        .collect();
    for s in samples {
        for (name, t) in activations(m, s)? {
            stats.get_mut(&name).unwrap().add_histogram(&t.to_f32_vec()?);
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    MinMax,
    Percentile(f64),
    Kl,
}

impl FromStr for CalibMethod {
    type Err = String;

    /// `minmax`, `kl`, `percentile` (0.9999) or `percentile:<p>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" => Ok(CalibMethod::MinMax),
            "kl" => Ok(CalibMethod::Kl),
            "percentile" => Ok(CalibMethod::Percentile(0.9999)),
            other => match other.strip_prefix("percentile:").map(str::parse::<f64>) {
                Some(Ok(p)) if p > 0.0 && p <= 1.0 => Ok(CalibMethod::Percentile(p)),
                _ => Err(format!("unknown calibration method `{s}`")),
            },
        }
    }
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibMethod::MinMax => f.write_str("minmax"),
            CalibMethod::Kl => f.write_str("kl"),
            CalibMethod::Percentile(p) => write!(f, "percentile:{p}"),
        }
    }
}

pub fn search_threshold(stats: &ActivationStats, method: CalibMethod) -> f64 {
    if !(stats.abs_max > 0.0) {
        return THRESHOLD_FLOOR;
    }
    let t = match method {
        CalibMethod::MinMax => stats.abs_max,
        CalibMethod::Percentile(p) => percentile(stats, p),
        CalibMethod::Kl => kl_threshold(stats),
    };
    t.max(THRESHOLD_FLOOR)
}

fn percentile(stats: &ActivationStats, p: f64) -> f64 {
    let total: u64 = stats.hist.iter().sum();
    if total == 0 {
        return stats.abs_max;
    }
    let target = p * total as f64;
    let mut cum = 0u64;
    for (i, c) in stats.hist.iter().enumerate() {
        cum += c;
        if cum as f64 >= target {
            return ((i + 1) as f64 * stats.bin_width()).min(stats.abs_max);
        }
    }
    stats.abs_max
}

/// `P` is `hist[..i]` with the tail folded into the last bin. `Q` is the
/// unclipped `hist[..i]` quantized to 128 levels and spread back over the
/// bins where `P` is nonzero. Returns `KL(P||Q)`.
pub fn kl_divergence_at(hist: &[u64], i: usize) -> f64 {
    let sliced: Vec<f64> = hist[..i].iter().map(|c| *c as f64).collect();
    let mut p = sliced.clone();
    p[i - 1] += hist[i..].iter().sum::<u64>() as f64;
    let chunk = i / QUANT_LEVELS;
    let mut q = vec![0f64; i];
    for k in 0..QUANT_LEVELS {
        let start = k * chunk;
        let end = if k == QUANT_LEVELS - 1 { i } else { start + chunk };
        let mass: f64 = sliced[start..end].iter().sum();
        let nonzero = p[start..end].iter().filter(|v| **v != 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = mass / nonzero as f64;
        for j in start..end {
            if p[j] != 0.0 {
                q[j] = share;
            }
        }
    }
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    if ps == 0.0 || qs == 0.0 {
        return f64::INFINITY;
    }
    p.iter()
        .zip(&q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| {
            let (pn, qn) = (pv / ps, qv / qs);
            if qn == 0.0 {
                f64::INFINITY
            } else {
                pn * (pn / qn).ln()
            }
        })
        .sum()
}

fn kl_threshold(stats: &ActivationStats) -> f64 {
    let mut best = (f64::INFINITY, QUANT_LEVELS);
    for i in QUANT_LEVELS..=HIST_BINS {
        let kl = kl_divergence_at(&stats.hist, i);
        if kl < best.0 {
            best = (kl, i);
        }
    }
    ((best.1 as f64 + 0.5) * stats.bin_width()).min(stats.abs_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibEntry {
    pub threshold: f64,
    pub min: f64,
    pub max: f64,
}

pub type CalibTable = BTreeMap<String, CalibEntry>;

pub fn build_calib_table(stats: &BTreeMap<String, ActivationStats>, method: CalibMethod) -> CalibTable {
    stats
        .iter()
        .map(|(name, s)| {
            (
                name.clone(),
                CalibEntry {
                    threshold: search_threshold(s, method),
                    min: s.min,
                    max: s.max,
                },
            )
        })
        .collect()
}

/// Stats plus threshold search in one step.
pub fn calibrate(m: &ModuleIR, samples: &[TensorMap], method: CalibMethod) -> Result<CalibTable> {
    Ok(build_calib_table(&collect_stats(m, samples)?, method))
}

pub fn format_calib_table(table: &CalibTable) -> String {
    let mut out = String::from(CALIB_HEADER);
    out.push('\n');
    for (name, e) in table {
        out.push_str(&format!(
            "{name} {} {} {}\n",
            fmt_sig6(e.threshold),
            fmt_sig6(e.min),
            fmt_sig6(e.max)
        ));
    }
    out
}

pub fn parse_calib_table(text: &str) -> Result<CalibTable> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CALIB_HEADER => {}
        _ => {
            return Err(Error::CalibParse {
                line: 1,
                reason: format!("expected header `{CALIB_HEADER}`"),
            })
        }
    }
    let mut table = CalibTable::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| Error::CalibParse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err("expected `name threshold min max`"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number `{s}`")));
        let e = CalibEntry {
            threshold: num(fields[1])?,
            min: num(fields[2])?,
            max: num(fields[3])?,
        };
        if !(e.threshold > 0.0) || !e.min.is_finite() || !e.max.is_finite() || e.min > e.max {
            return Err(err("threshold must be positive and min <= max"));
        }
        if table.insert(fields[0].to_string(), e).is_some() {
            return Err(err(&format!("duplicate entry `{}`", fields[0])));
        }
    }
    Ok(table)
}

pub fn write_calib_table(path: impl AsRef<Path>, table: &CalibTable) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_calib_table(table)).map_err(|e| Error::io(path, e))
}

pub fn read_calib_table(path: impl AsRef<Path>) -> Result<CalibTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib_table(&text)
}

/// The calibrated range an entry gives: `[-t, t]` when symmetric, else
/// `[min, max]` widened to contain zero.
pub fn calibrated_range(e: &CalibEntry, symmetric: bool) -> (f64, f64) {
    if symmetric {
        return (-e.threshold, e.threshold);
    }
    let (lo, hi) = (e.min.min(0.0), e.max.max(0.0));
    if hi - lo < 1e-10 {
        (-e.threshold, e.threshold)
    } else {
        (lo, hi)
    }
}

/// Annotates every activation with its calibrated range.
pub fn apply_calibration(m: &ModuleIR, table: &CalibTable, symmetric: bool) -> Result<ModuleIR> {
    if m.state != ModuleState::TopF32 {
        return Err(Error::WrongState {
            expected: "TOP_F32".into(),
            found: m.state.to_string(),
        });
    }
    let mut out = m.clone();
    for v in m.live_values() {
        if m.is_weight(v) {
            continue;
        }
        let name = m.name_of(v);
        let e = table
            .get(name)
            .ok_or_else(|| Error::MissingCalibration(name.to_string()))?;
        let (min, max) = calibrated_range(e, symmetric);
        out.value_mut(v).ty.quant = QuantAnnotation::Calibrated { min, max };
    }
    out.state = ModuleState::TopCalibrated;
    out.asymmetric = !symmetric;
    Ok(out)
}

//! Stage comparison: cosine and euclidean similarity between dumps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::Mode;
use crate::tensor_store::TensorMap;

/// `Σxy / (√Σx² · √Σy²)`, unrounded. Two zero vectors give 1, exactly one
/// zero vector gives 0.
pub fn cosine_similarity(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(x.len(), y.len()));
    }
    let (mut xy, mut xx, mut yy) = (0f64, 0f64, 0f64);
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (*a as f64, *b as f64);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    Ok(match (xx == 0.0, yy == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => xy / (xx.sqrt() * yy.sqrt()),
    })
}

/// `1 - ed/sr` with `ed = √Σ(x-y)²` and `sr = √Σ((x+y)/2)²`. When `sr` is
/// zero the result is 1 if the vectors are equal and `-inf` otherwise.
pub fn euclidean_similarity(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(x.len(), y.len()));
    }
    let (mut ed, mut sr) = (0f64, 0f64);
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (*a as f64, *b as f64);
        ed += (a - b) * (a - b);
        sr += ((a + b) / 2.0) * ((a + b) / 2.0);
    }
    let (ed, sr) = (ed.sqrt(), sr.sqrt());
    Ok(if sr == 0.0 {
        if ed == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ed / sr
    })
}

/// Rounds to three decimals for display.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub cos_min: f64,
    pub euc_min: f64,
    /// Require bitwise-identical values instead of similarity.
    pub exact: bool,
}

impl Thresholds {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::F32 => Thresholds {
                cos_min: 1.0,
                euc_min: 1.0,
                exact: true,
            },
            Mode::Bf16 | Mode::F16 => Thresholds {
                cos_min: 0.95,
                euc_min: 0.85,
                exact: false,
            },
            Mode::Int8 => Thresholds {
                cos_min: 0.9,
                euc_min: 0.5,
                exact: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSimilarity {
    pub name: String,
    pub cosine: f64,
    pub euclid: f64,
    pub max_abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub thresholds: Thresholds,
    pub tensors: Vec<TensorSimilarity>,
    pub min_cosine: f64,
    pub min_euclid: f64,
    /// Name of the failing (or, if all pass, lowest-cosine) tensor.
    pub worst: String,
    pub pass: bool,
}

impl SimilarityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<32} cos {:.3} ({:.6})  euc {:.3} ({:.6})  max|d| {:.3e}  {}\n",
                t.name,
                round3(t.cosine),
                t.cosine,
                round3(t.euclid),
                t.euclid,
                t.max_abs_diff,
                if t.pass { "ok" } else { "FAIL" }
            ));
        }
        let rule = if self.thresholds.exact {
            "exact".to_string()
        } else {
            format!(
                "cos > {} and euc > {}",
                self.thresholds.cos_min, self.thresholds.euc_min
            )
        };
        s.push_str(&format!(
            "{} tensors, min cos {:.3}, min euc {:.3}, worst `{}`, rule {rule}: {}\n",
            self.tensors.len(),
            round3(self.min_cosine),
            round3(self.min_euclid),
            self.worst,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares the tensors both dumps share by name.
pub fn compare_stages(a: &TensorMap, b: &TensorMap, th: Thresholds) -> Result<SimilarityReport> {
    let mut tensors = Vec::new();
    for (name, ta) in a {
        let Some(tb) = b.get(name) else { continue };
        let (x, y) = (ta.to_f32_vec()?, tb.to_f32_vec()?);
        let cosine = cosine_similarity(&x, &y)?;
        let euclid = euclidean_similarity(&x, &y)?;
        let max_abs_diff = x
            .iter()
            .zip(&y)
            .map(|(p, q)| (*p as f64 - *q as f64).abs())
            .fold(0f64, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
        let pass = if th.exact {
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        } else {
            cosine > th.cos_min && euclid > th.euc_min
        };
        tensors.push(TensorSimilarity {
            name: name.clone(),
            cosine,
            euclid,
            max_abs_diff,
            pass,
        });
    }
    if tensors.is_empty() {
        return Err(Error::NothingToCompare);
    }
    let min_cosine = tensors.iter().map(|t| t.cosine).fold(f64::INFINITY, f64::min);
    let min_euclid = tensors.iter().map(|t| t.euclid).fold(f64::INFINITY, f64::min);
    let worst = tensors
        .iter()
        .find(|t| !t.pass)
        .or_else(|| tensors.iter().min_by(|p, q| p.cosine.total_cmp(&q.cosine)))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    let pass = tensors.iter().all(|t| t.pass);
    Ok(SimilarityReport {
        thresholds: th,
        tensors,
        min_cosine,
        min_euclid,
        worst,
        pass,
    })
}

use crate::error::{Error, Result};
use crate::ir::{PerAxisQuant, QuantAnnotation, UniformQuant};
use crate::kernels::quantize_f32;
use crate::numeric::round_half_away;
use crate::tensor_store::{DType, HostTensor};

pub const SCALE_FLOOR: f64 = 1e-10;

/// Uniform I8 parameters for a calibrated range. Symmetric uses
/// `[-127, 127]` with zero point 0; asymmetric uses `[-128, 127]`.
pub fn derive_uniform(min: f64, max: f64, asymmetric: bool) -> UniformQuant {
    let (min, max) = (min.min(0.0), max.max(0.0));
    if asymmetric {
        let scale = ((max - min) / 255.0).max(SCALE_FLOOR);
        let zp = (-128.0 - round_half_away(min / scale)).clamp(-128.0, 127.0) as i32;
        UniformQuant {
            scale,
            zero_point: zp,
            qmin: -128,
            qmax: 127,
            storage: DType::I8,
            expressed: DType::F32,
        }
    } else {
        let threshold = min.abs().max(max.abs());
        UniformQuant {
            scale: (threshold / 127.0).max(SCALE_FLOOR),
            zero_point: 0,
            qmin: -127,
            qmax: 127,
            storage: DType::I8,
            expressed: DType::F32,
        }
    }
}

/// Per-channel symmetric weight scales along `axis`: `absmax(W_c) / 127`.
/// An all-zero channel gets scale 1.
pub fn weight_per_axis(t: &HostTensor) -> Result<(Vec<f32>, Vec<f64>)> {
    weight_per_axis_at(t, 0)
}

pub fn weight_per_axis_at(t: &HostTensor, axis: usize) -> Result<(Vec<f32>, Vec<f64>)> {
    let x = t.to_f32_vec()?;
    let dim = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut absmax = vec![0f64; dim];
    for (i, v) in x.iter().enumerate() {
        let c = (i / inner) % dim;
        absmax[c] = absmax[c].max(v.abs() as f64);
    }
    let scales = absmax.iter().map(|a| if *a > 0.0 { a / 127.0 } else { 1.0 }).collect();
    Ok((x, scales))
}

/// `round(r / s) + zp` saturated to the storage range, per element or
/// per channel along the annotation's axis.
pub fn quantize_tensor(t: &HostTensor, q: &QuantAnnotation) -> Result<HostTensor> {
    let x = t.to_f32_vec()?;
    let out: Vec<i8> = match q {
        QuantAnnotation::Uniform(u) => x
            .iter()
            .map(|&v| quantize_f32(v, u.scale, u.zero_point, u.qmin, u.qmax))
            .collect(),
        QuantAnnotation::UniformPerAxis(p) => {
            let dim = t.shape[p.axis];
            let inner: usize = t.shape[p.axis + 1..].iter().product();
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = (i / inner) % dim;
                    quantize_f32(v, p.scales[c], p.zero_points[c], p.qmin, p.qmax)
                })
                .collect()
        }
        _ => {
            return Err(Error::UnsupportedCast {
                from: t.dtype.to_string(),
                to: "non-uniform annotation".into(),
            })
        }
    };
    HostTensor::from_i8(t.name.clone(), t.shape.clone(), &out)
}

pub fn per_axis_i8(scales: Vec<f64>, axis: usize) -> QuantAnnotation {
    QuantAnnotation::UniformPerAxis(PerAxisQuant {
        zero_points: vec![0; scales.len()],
        scales,
        axis,
        qmin: -127,
        qmax: 127,
        storage: DType::I8,
        expressed: DType::F32,
    })
}

/// `M = mant * 2^e`, `mant` in `[0.5, 1)`.
fn frexp(m: f64) -> (f64, i32) {
    let mut e = m.log2().floor() as i32 + 1;
    let mut mant = m / 2f64.powi(e);
    while mant >= 1.0 {
        mant /= 2.0;
        e += 1;
    }
    while mant < 0.5 {
        mant *= 2.0;
        e -= 1;
    }
    (mant, e)
}

/// Per channel: `M_c = s_in * s_w[c] / s_out` as `multiplier_c / 2^rshift_c`
/// with a 31-bit normalized multiplier.
pub fn derive_requant(s_in: f64, s_w: &[f64], s_out: f64) -> Result<(Vec<i32>, Vec<i32>)> {
    let mut mults = Vec::with_capacity(s_w.len());
    let mut shifts = Vec::with_capacity(s_w.len());
    for &w in s_w {
        let m = s_in * w / s_out;
        if m == 0.0 {
            mults.push(0);
            shifts.push(0);
            continue;
        }
        if !m.is_finite() || m < 0.0 {
            return Err(Error::RequantOverflow(i64::MAX));
        }
        let (mant, mut e) = frexp(m);
        let mut mult = round_half_away(mant * 2f64.powi(31)) as i64;
        if mult == 1 << 31 {
            mult = 1 << 30;
            e += 1;
        }
        let rshift = 31 - e as i64;
        if !(0..=62).contains(&rshift) {
            return Err(Error::RequantOverflow(rshift));
        }
        mults.push(mult as i32);
        shifts.push(rshift as i32);
    }
    Ok((mults, shifts))
}

/// Bias in the accumulator domain: `round(b_c / (s_in * s_w[c]))` as I32.
pub fn quantize_bias(bias: &[f32], s_in: f64, s_w: &[f64]) -> Vec<i32> {
    bias.iter()
        .enumerate()
        .map(|(c, b)| {
            let s = s_in * if s_w.len() == 1 { s_w[0] } else { s_w[c] };
            round_half_away(*b as f64 / s).clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

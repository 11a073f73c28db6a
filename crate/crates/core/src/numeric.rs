//! Scalar helpers shared by every arithmetic path: byte packing, reduced
//! float narrowing, and the integer rounding rules used by quantization.

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn i32_to_bytes(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_i32(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn u16_to_bytes(values: &[u16]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_u16(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect()
}

/// F32 -> BF16 with round-to-nearest-even on the dropped 16 bits.
pub fn f32_to_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    if value.is_nan() {
        // keep sign, force a quiet mantissa bit so truncation never yields inf
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// F32 -> IEEE binary16, round-to-nearest-even, subnormals kept,
/// overflow to infinity.
pub fn f32_to_f16(value: f32) -> u16 {
    let x = value.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xFF) as i32;
    let man = x & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return sign | 0x7C00;
        }
        return sign | 0x7C00 | 0x0200 | (man >> 13) as u16;
    }

    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1F {
        return sign | 0x7C00;
    }

    if half_exp <= 0 {
        // result is subnormal or zero
        let shift = 14 - half_exp;
        if shift > 24 {
            return sign;
        }
        let full = man | 0x0080_0000;
        let kept = full >> shift;
        let rem = full & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        let round_up = rem > halfway || (rem == halfway && (kept & 1) == 1);
        return sign | (kept + round_up as u32) as u16;
    }

    let kept = man >> 13;
    let rem = man & 0x1FFF;
    let base = ((half_exp as u32) << 10) | kept;
    let round_up = rem > 0x1000 || (rem == 0x1000 && (kept & 1) == 1);
    // a carry out of the mantissa bumps the exponent, possibly to infinity
    sign | (base + round_up as u32) as u16
}

pub fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1F) as u32;
    let man = (bits & 0x03FF) as u32;
    let out = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: normalize into an f32 exponent
            let lead = man.leading_zeros() - 22;
            let man = (man << (lead + 1)) & 0x03FF;
            let exp = 112 - lead;
            sign | (exp << 23) | (man << 13)
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        (0x1F, _) => sign | 0x7FC0_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(out)
}

/// Round half away from zero, the single rounding rule used by every
/// quantization step.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn saturate(v: i64, lo: i32, hi: i32) -> i32 {
    v.clamp(lo as i64, hi as i64) as i32
}

/// `round(v / 2^shift)` with ties away from zero.
pub fn rounding_rshift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let half = 1i64 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Fixed-point requantization: `round(acc * multiplier / 2^rshift)`.
pub fn requant(acc: i64, multiplier: i32, rshift: i32) -> i64 {
    rounding_rshift(acc * multiplier as i64, rshift as u32)
}

/// Shortest decimal that round-trips, with at least six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    for prec in 5..17 {
        let s = format!("{v:.prec$e}");
        if s.parse::<f64>().ok() == Some(v) {
            return s;
        }
    }
    format!("{v:e}")
}

mod common;

use proptest::prelude::*;
use tpuc::backend::layer_group;
use tpuc::error::Error;
use tpuc::ir::{ChipConfig, Mode, QuantAnnotation, TensorType, UniformQuant};
use tpuc::kernels::{ConvDesc, QuantArgs};
use tpuc::lowering::derive_requant;
use tpuc::numeric::{bf16_to_f32, bytes_to_u16, f32_to_bf16, f32_to_bytes, round_half_away};
use tpuc::pipeline::{deploy, DeployOptions};
use tpuc::tensor_store::DType;
use tpuc::tpu::{cast_apply, conv2d_int8, dequantize_value, tpu_inference};
use tpuc::transforms::{calibrate, CalibMethod};

fn i8_type(n: usize, scale: f64, zp: i32, qmin: i32) -> TensorType {
    TensorType::new(vec![n], DType::I8).with_quant(QuantAnnotation::Uniform(UniformQuant {
        scale,
        zero_point: zp,
        qmin,
        qmax: 127,
        storage: DType::I8,
        expressed: DType::F32,
    }))
}

fn f32_type(n: usize) -> TensorType {
    TensorType::f32(vec![n])
}

#[test]
fn cast_to_i8_uses_the_zero_point() {
    let to = i8_type(5, 0.0340039, -5, -128);
    let x = [0.0f32, -4.178, 4.493, 0.034, 1e9];
    let q = cast_apply(&f32_to_bytes(&x), &f32_type(5), &to).unwrap();
    let q: Vec<i8> = q.iter().map(|b| *b as i8).collect();
    assert_eq!(q[0], -5);
    assert_eq!(q[1], -128);
    assert_eq!(q[2], 127);
    assert_eq!(q[3], -4);
    assert_eq!(q[4], 127);

    // the zero point dequantizes to exactly 0
    let back = cast_apply(&[(-5i8) as u8], &i8_type(1, 0.0340039, -5, -128), &f32_type(1)).unwrap();
    assert_eq!(f32::from_le_bytes(back.try_into().unwrap()), 0.0);
}

#[test]
fn bf16_cast_examples() {
    let to = TensorType::new(vec![2], DType::BF16);
    let x = [1.0f32, f32::from_bits(0x4049_0FD0)];
    let b = bytes_to_u16(&cast_apply(&f32_to_bytes(&x), &f32_type(2), &to).unwrap());
    assert_eq!(b, [0x3F80, 0x4049]);
}

#[test]
fn unsupported_casts() {
    let a = i8_type(1, 0.1, 0, -128);
    assert!(matches!(cast_apply(&[0], &a, &a), Err(Error::UnsupportedCast { .. })));
    // I8 without a uniform annotation
    let bare = TensorType::new(vec![1], DType::I8);
    assert!(cast_apply(&[0, 0, 0, 0], &f32_type(1), &bare).is_err());
    let i32t = TensorType::new(vec![1], DType::I32);
    assert!(cast_apply(&[0, 0, 0, 0], &f32_type(1), &i32t).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bf16_round_trip_is_idempotent(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(x.is_finite());
        let once = f32_to_bf16(x);
        let twice = f32_to_bf16(bf16_to_f32(once));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn i8_dequantize_then_quantize_is_identity(scale in 1e-4f64..10.0, zp in -128i32..=127, code in -128i32..=127) {
        let t = i8_type(1, scale, zp, -128);
        let real = cast_apply(&[code as i8 as u8], &t, &f32_type(1)).unwrap();
        let again = cast_apply(&real, &f32_type(1), &t).unwrap();
        prop_assert_eq!(again[0] as i8 as i32, code);
    }
}

fn desc(ic: u32, oc: u32, h: u32, w: u32, k: u32, s: u32, p: u32, q: QuantArgs) -> ConvDesc {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    ConvDesc {
        dtype: DType::I8,
        n: 1,
        ic,
        ih: h,
        iw: w,
        oc,
        oh,
        ow,
        kh: k,
        kw: k,
        sh: s,
        sw: s,
        dh: 1,
        dw: 1,
        pt: p,
        pl: p,
        group: 1,
        has_bias: true,
        do_relu: false,
        relu_limit: -1.0,
        q,
    }
}

fn qargs(zp_in: i32, zp_out: i32, mult: Vec<i32>, shift: Vec<i32>) -> QuantArgs {
    QuantArgs {
        zp_in,
        zp_out,
        qmin: -128,
        qmax: 127,
        act_max: 127,
        multiplier: mult,
        rshift: shift,
    }
}

#[test]
fn conv_of_zero_point_input_gives_zero_point_output() {
    let d = desc(3, 2, 5, 5, 3, 1, 1, qargs(-7, 12, vec![1 << 30; 2], vec![33; 2]));
    let x = vec![-7i8; 75];
    let w: Vec<i8> = (0..54).map(|i| (i % 11) as i8 - 5).collect();
    let y = conv2d_int8(&d, &x, &w, Some(&[0, 0])).unwrap();
    assert!(y.iter().all(|v| *v == 12));
}

#[test]
fn conv_small_integer_example() {
    // 1x1 conv: code 10 times weight 3 scaled by one half
    let (m, r) = derive_requant(1.0, &[0.5], 1.0).unwrap();
    let d = desc(1, 1, 1, 1, 1, 1, 0, qargs(0, 0, m, r));
    assert_eq!(conv2d_int8(&d, &[10], &[3], Some(&[0])).unwrap(), [15]);
    // saturation at both ends
    let (m, r) = derive_requant(1.0, &[1.0], 1.0).unwrap();
    let d = desc(2, 1, 1, 1, 1, 1, 0, qargs(0, 0, m, r));
    assert_eq!(conv2d_int8(&d, &[127, 127], &[127, 127], None).unwrap(), [127]);
    assert_eq!(conv2d_int8(&d, &[127, 127], &[-127, -127], None).unwrap(), [-128]);
}

/// Round-half-away `num / 2^shift`, computed by exact integer division.
fn div_pow2(num: i128, shift: i32) -> i128 {
    let den = 1i128 << shift;
    let q = (2 * num.abs() + den) / (2 * den);
    q * num.signum()
}

#[allow(clippy::too_many_arguments)]
fn conv_i8_oracle(
    x: &[i8],
    w: &[i8],
    b: &[i32],
    ic: usize,
    oc: usize,
    h: usize,
    wd: usize,
    k: usize,
    s: usize,
    p: usize,
    q: &QuantArgs,
) -> Vec<i8> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = Vec::new();
    for o in 0..oc {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b[o] as i128;
                for c in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((y * s + ky) as i64 - p as i64, (xo * s + kx) as i64 - p as i64);
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            let xv = x[c * h * wd + iy as usize * wd + ix as usize] as i128 - q.zp_in as i128;
                            acc += xv * w[((o * ic + c) * k + ky) * k + kx] as i128;
                        }
                    }
                }
                let v = div_pow2(acc * q.multiplier[o] as i128, q.rshift[o]) + q.zp_out as i128;
                out.push(v.clamp(q.qmin as i128, q.qmax as i128) as i8);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn int8_conv_matches_brute_force(
        ic in 1usize..=4, oc in 1usize..=4, h in 1usize..=8, wd in 1usize..=8,
        k in prop::sample::select(vec![1usize, 3]), s in 1usize..=2, seed in any::<u64>(),
        zp_in in -20i32..=20, zp_out in -20i32..=20,
    ) {
        use rand::{Rng, SeedableRng};
        let p = k / 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<i8> = (0..ic * h * wd).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..oc * ic * k * k).map(|_| rng.gen_range(-127..=127)).collect();
        let b: Vec<i32> = (0..oc).map(|_| rng.gen_range(-5000..5000)).collect();
        let s_w: Vec<f64> = (0..oc).map(|_| rng.gen_range(1e-3..2e-2)).collect();
        let (mult, shift) = derive_requant(0.03, &s_w, 0.05).unwrap();
        let q = qargs(zp_in, zp_out, mult, shift);
        let d = desc(ic as u32, oc as u32, h as u32, wd as u32, k as u32, s as u32, p as u32, q.clone());
        let got = conv2d_int8(&d, &x, &w, Some(&b)).unwrap();
        prop_assert_eq!(got, conv_i8_oracle(&x, &w, &b, ic, oc, h, wd, k, s, p, &q));
    }

    #[test]
    fn int8_conv_is_within_one_step_of_float(
        ic in 1usize..=4, oc in 1usize..=4, h in 2usize..=8, wd in 2usize..=8, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let (k, p, s) = (3usize, 1usize, 1usize);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (s_in, s_out, zp_in, zp_out) = (0.02, 0.04, 3, -2);
        let x: Vec<i8> = (0..ic * h * wd).map(|_| rng.gen_range(-100..=100)).collect();
        let w: Vec<i8> = (0..oc * ic * k * k).map(|_| rng.gen_range(-127..=127)).collect();
        let s_w: Vec<f64> = (0..oc).map(|_| rng.gen_range(1e-3..5e-3)).collect();
        let b: Vec<i32> = (0..oc).map(|_| rng.gen_range(-300..300)).collect();
        let (mult, shift) = derive_requant(s_in, &s_w, s_out).unwrap();
        let q = qargs(zp_in, zp_out, mult, shift);
        let d = desc(ic as u32, oc as u32, h as u32, wd as u32, k as u32, s as u32, p as u32, q);
        let got = conv2d_int8(&d, &x, &w, Some(&b)).unwrap();

        // real-valued conv of the dequantized operands, quantized once
        let (oh, ow) = (h, wd);
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o] as f64 * s_in * s_w[o];
                    for c in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y as i64 + ky as i64 - 1, xo as i64 + kx as i64 - 1);
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xr = (x[c * h * wd + iy as usize * wd + ix as usize] as i32 - zp_in) as f64 * s_in;
                                let wr = w[((o * ic + c) * k + ky) * k + kx] as f64 * s_w[o];
                                acc += xr * wr;
                            }
                        }
                    }
                    let want = (round_half_away(acc / s_out) + zp_out as f64).clamp(-128.0, 127.0) as i32;
                    let g = got[(o * oh + y) * ow + xo] as i32;
                    prop_assert!((g - want).abs() <= 1, "{} vs {}", g, want);
                }
            }
        }
    }
}

#[test]
fn accumulator_overflow_is_an_error() {
    let n = 1 << 16;
    let (m, r) = derive_requant(1.0, &[1e-6], 1.0).unwrap();
    let mut d = desc(1, 1, 1, 1, 1, 1, 0, qargs(0, 0, m, r));
    d.ic = n;
    let x = vec![127i8; n as usize];
    let w = vec![127i8; n as usize];
    // 65536 * 127 * 127 + bias exceeds i32
    assert!(matches!(
        conv2d_int8(&d, &x, &w, Some(&[i32::MAX - 10])),
        Err(Error::AccumOverflow)
    ));
}

#[test]
fn per_axis_i32_dump_rescales_per_channel() {
    let ty = TensorType::new(vec![2], DType::I32).with_quant(QuantAnnotation::UniformPerAxis(tpuc::ir::PerAxisQuant {
        scales: vec![0.5, 0.25],
        zero_points: vec![0, 0],
        axis: 0,
        qmin: i32::MIN,
        qmax: i32::MAX,
        storage: DType::I32,
        expressed: DType::F32,
    }));
    let bytes = tpuc::numeric::i32_to_bytes(&[4, 4]);
    assert_eq!(dequantize_value(&ty, &bytes).unwrap(), [2.0, 1.0]);
}

#[test]
fn grouping_is_transparent_to_tpu_inference() {
    for seed in 0..30u64 {
        let m = common::random_graph(seed);
        let x = common::random_inputs(&m, seed);
        for mode in Mode::ALL {
            let mut o = DeployOptions::new(mode);
            o.chip = ChipConfig::by_name("virt32-4k").unwrap();
            o.no_group = true;
            if mode == Mode::Int8 {
                o.calib = Some(calibrate(&m, &common::samples(&m, 2, seed), CalibMethod::Kl).unwrap());
            }
            let d = deploy(&m, &o).unwrap();
            let grouped = layer_group(&d.lowered, &o.chip).unwrap();
            let a = tpu_inference(&d.lowered, &x).unwrap();
            let b = tpu_inference(&grouped, &x).unwrap();
            for (name, t) in &a {
                assert_eq!(t.data, b[name].data, "seed {seed} {mode} {name}");
            }
        }
    }
}

#[test]
fn tpu_inference_rejects_top_modules() {
    let m = common::cnn();
    assert!(matches!(
        tpu_inference(&m, &common::random_inputs(&m, 0)),
        Err(Error::WrongState { .. })
    ));
}

use proptest::prelude::*;
use tpuc::tensor_store::{
    npz_read, npz_read_bytes, npz_write, npz_write_bytes, tensor_byte_size, DType, HostTensor, TensorMap,
};
use tpuc::Error;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/numpy_mixed.npz");

#[test]
fn byte_size_examples() {
    assert_eq!(tensor_byte_size(&[1, 32, 100, 100], DType::F32).unwrap(), 1_280_000);
    assert_eq!(tensor_byte_size(&[1], DType::I8).unwrap(), 1);
    assert_eq!(tensor_byte_size(&[1, 16, 100, 100], DType::BF16).unwrap(), 320_000);
    assert!(matches!(
        tensor_byte_size(&[usize::MAX, 2], DType::F32),
        Err(Error::SizeOverflow)
    ));
}

#[test]
fn numpy_fixture_parses() {
    let m = npz_read(FIXTURE).unwrap();
    assert_eq!(m.len(), 7);

    let f = &m["filter_conv1"];
    assert_eq!(
        (f.dtype, f.shape.clone(), f.data.len()),
        (DType::F32, vec![65, 32, 3, 3], 74_880)
    );
    let v = f.to_f32_vec().unwrap();
    for (i, x) in v.iter().enumerate() {
        // numpy evaluates arange * 0.001 - 1.0 in float32
        let want = (i as f32) * 0.001f32 - 1.0f32;
        assert_eq!(x.to_bits(), want.to_bits(), "element {i}");
    }

    let b = m["bias_conv1"].to_f32_vec().unwrap();
    assert_eq!((b[0], b[32], b[64]), (-1.0, 0.0, 1.0));

    let h = &m["half"];
    assert_eq!((h.dtype, h.shape.clone()), (DType::F16, vec![2, 3]));
    let bits: Vec<u16> = h.data.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let oracle: Vec<u16> = [0.5f32, -2.0, 65504.0, 1e-4, 0.0, -0.0]
        .iter()
        .map(|x| half::f16::from_f32(*x).to_bits())
        .collect();
    assert_eq!(bits, oracle);

    let codes = &m["codes"];
    assert_eq!((codes.dtype, codes.shape.clone()), (DType::I8, vec![16, 16]));
    assert_eq!(codes.as_i8_vec(), (-128..128).map(|x| x as i8).collect::<Vec<_>>());
    assert_eq!(m["bytes"].dtype, DType::U8);
    assert_eq!(m["bytes"].data, (0..=255).collect::<Vec<u8>>());
    assert_eq!(m["acc"].as_i32_vec(), vec![i32::MIN, -1, 0, 1, i32::MAX]);

    // rank-0 members load as [1]
    let s = &m["scalar"];
    assert_eq!((s.shape.clone(), s.to_f32_vec().unwrap()), (vec![1], vec![3.25]));
}

#[test]
fn numpy_fixture_rewrites_identically() {
    let m = npz_read(FIXTURE).unwrap();
    let again = npz_read_bytes(&npz_write_bytes(&m)).unwrap();
    assert_eq!(again, m);
}

#[test]
fn file_round_trip_and_empty_archive() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.npz");
    npz_write(&p, &TensorMap::new()).unwrap();
    assert!(npz_read(&p).unwrap().is_empty());
    let mut m = TensorMap::new();
    m.insert("s".into(), HostTensor::from_f32("s", vec![1], &[1.5]).unwrap());
    npz_write(&p, &m).unwrap();
    assert_eq!(npz_read(&p).unwrap(), m);
    assert!(matches!(
        npz_read(dir.path().join("missing.npz")),
        Err(Error::Io { .. })
    ));
}

fn dtype() -> impl Strategy<Value = DType> {
    prop_oneof![
        Just(DType::F32),
        Just(DType::F16),
        Just(DType::BF16),
        Just(DType::I8),
        Just(DType::U8),
        Just(DType::I32)
    ]
}

fn tensor() -> impl Strategy<Value = HostTensor> {
    (dtype(), prop::collection::vec(1usize..4, 1..=8)).prop_flat_map(|(dt, shape)| {
        let n: usize = shape.iter().product::<usize>() * dt.byte_size();
        prop::collection::vec(any::<u8>(), n)
            .prop_map(move |data| HostTensor::new("t", shape.clone(), dt, data).unwrap())
    })
}

proptest! {
    #[test]
    fn archives_round_trip_bitwise(ts in prop::collection::vec(tensor(), 0..6)) {
        let mut m = TensorMap::new();
        for (i, t) in ts.into_iter().enumerate() {
            let name = format!("member_{i}");
            m.insert(name.clone(), t.with_name(name));
        }
        let bytes = npz_write_bytes(&m);
        let back = npz_read_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(npz_write_bytes(&back), bytes);
    }

    #[test]
    fn byte_size_is_exact_and_monotone(shape in prop::collection::vec(1usize..50, 1..5), i in 0usize..4, dt in dtype()) {
        let s = tensor_byte_size(&shape, dt).unwrap();
        prop_assert_eq!(s, shape.iter().product::<usize>() * dt.byte_size());
        let mut bigger = shape.clone();
        let k = i % bigger.len();
        bigger[k] += 1;
        prop_assert!(tensor_byte_size(&bigger, dt).unwrap() > s);
    }
}

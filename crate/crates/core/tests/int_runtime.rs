mod common;

use proptest::prelude::*;
use qppg::numerics::Rng64;
use qppg::runtime::{import_model, pack, requantize, unpack};

#[test]
fn runtime_is_bit_exact_against_reference() {
    common::crit4_bit_exact().unwrap();
}

#[test]
fn truncated_model_is_rejected() {
    let mut rng = Rng64::new(5);
    let (m, _, _) = common::random_qmodel(&mut rng);
    let bytes = qppg::runtime::export_model(&m).unwrap();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(import_model(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn pack_layout_is_lsb_first() {
    assert_eq!(pack(&[1, 2, 3, 0], 2).unwrap().bytes, vec![0b0011_1001]);
    assert_eq!(pack(&[0xA, 0x5], 4).unwrap().bytes, vec![0x5A]);
}

proptest! {
    #[test]
    fn pack_round_trips(bits in prop::sample::select(vec![2u8, 4, 8]), raw in prop::collection::vec(any::<u8>(), 0..100)) {
        let v: Vec<u8> = raw.iter().map(|x| x & ((1u16 << bits) - 1) as u8).collect();
        let p = pack(&v, bits).unwrap();
        prop_assert_eq!(p.bytes.len(), (v.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack(&p), v);
    }

    #[test]
    fn requantize_matches_wide_arithmetic(acc in any::<i32>(), m in 0i32..=i32::MAX, sh in 0u8..=31, z in 0i32..256) {
        let wide = ((acc as i128 * m as i128 + if sh == 0 { 0 } else { 1i128 << (sh - 1) }) >> sh) as i64 + z as i64;
        prop_assert_eq!(requantize(acc, m, sh, z, 8) as i64, wide.clamp(0, 255));
    }
}

//! Sub-byte packing: element 0 sits in the least-significant bits of byte 0.

use super::RuntimeError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTensor {
    pub bits: u8,
    pub len: usize,
    pub bytes: Vec<u8>,
}

pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack(values: &[u8], bits: u8) -> Result<PackedTensor, RuntimeError> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(RuntimeError::Range(format!("unsupported bit width {bits}")));
    }
    let max = ((1u16 << bits) - 1) as u8;
    let mut bytes = vec![0u8; packed_len(values.len(), bits)];
    let per = 8 / bits as usize;
    for (i, &v) in values.iter().enumerate() {
        if v > max {
            return Err(RuntimeError::Range(format!("value {v} at {i} does not fit in {bits} bits")));
        }
        bytes[i / per] |= v << ((i % per) * bits as usize);
    }
    Ok(PackedTensor { bits, len: values.len(), bytes })
}

pub fn unpack(t: &PackedTensor) -> Vec<u8> {
    let per = 8 / t.bits as usize;
    let mask = ((1u16 << t.bits) - 1) as u8;
    (0..t.len).map(|i| (t.bytes[i / per] >> ((i % per) * t.bits as usize)) & mask).collect()
}

//! Bit-exact wire encoding of quantized messages.
//!
//! Layout (big-endian bit order, final byte zero-padded):
//!
//! ```text
//! header   : tag (4 bits) | dim (28 bits) | param (32 bits)
//! Dense32  : dim x f32
//! Qsgd     : norm f32 | dim x (sign bit | (n-1)-bit magnitude)
//! Sparse   : rescale f32 | k x (u32 index | f32 value)
//! ```
//!
//! `param` is 32 for `Dense32`, the bit width `n` for `Qsgd` and `k` for `Sparse`.

use super::{Payload, QuantizedMessage, QuantizerError};

pub const HEADER_BITS: u64 = 64;
pub const MAX_DIM: usize = (1 << 28) - 1;

const TAG_DENSE32: u64 = 0x1;
const TAG_QSGD: u64 = 0x2;
const TAG_SPARSE: u64 = 0x3;

struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn with_capacity_bits(bits: u64) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            bits: 0,
        }
    }

    /// Appends the low `width` bits of `value`, most significant first.
    fn push(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for i in (0..width).rev() {
            let bit = ((value >> i) & 1) as u8;
            let offset = (self.bits % 8) as u32;
            if offset == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> offset;
            }
            self.bits += 1;
        }
    }

    fn finish(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bits)
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.pos
    }

    fn read(&mut self, width: u32) -> Result<u64, QuantizerError> {
        if u64::from(width) > self.remaining() {
            return Err(QuantizerError::Corrupt("payload truncated".into()));
        }
        let mut value = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            value = (value << 1) | u64::from(bit);
            self.pos += 1;
        }
        Ok(value)
    }
}

/// Exact serialized length in bits.
pub fn encoded_bits(msg: &QuantizedMessage) -> u64 {
    let d = msg.dim as u64;
    HEADER_BITS
        + match &msg.payload {
            Payload::Dense(_) => 32 * d,
            Payload::Qsgd { bits, .. } => 32 + u64::from(*bits) * d,
            Payload::Sparse { indices, .. } => 32 + 64 * indices.len() as u64,
        }
}

pub fn encode(msg: &QuantizedMessage) -> Vec<u8> {
    let total = encoded_bits(msg);
    let mut w = BitWriter::with_capacity_bits(total);
    let dim = msg.dim as u64;
    match &msg.payload {
        Payload::Dense(values) => {
            w.push(TAG_DENSE32, 4);
            w.push(dim, 28);
            w.push(32, 32);
            for v in values {
                w.push(u64::from(v.to_bits()), 32);
            }
        }
        Payload::Qsgd { bits, norm, levels } => {
            w.push(TAG_QSGD, 4);
            w.push(dim, 28);
            w.push(u64::from(*bits), 32);
            w.push(u64::from(norm.to_bits()), 32);
            let mag_bits = *bits - 1;
            for &level in levels {
                w.push(u64::from(level < 0), 1);
                w.push(u64::from(level.unsigned_abs()), mag_bits);
            }
        }
        Payload::Sparse {
            indices,
            values,
            rescale,
        } => {
            w.push(TAG_SPARSE, 4);
            w.push(dim, 28);
            w.push(indices.len() as u64, 32);
            w.push(u64::from(rescale.to_bits()), 32);
            for (&i, v) in indices.iter().zip(values) {
                w.push(u64::from(i), 32);
                w.push(u64::from(v.to_bits()), 32);
            }
        }
    }
    let (bytes, bits) = w.finish();
    debug_assert_eq!(bits, total);
    bytes
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedMessage, QuantizerError> {
    let mut r = BitReader::new(bytes);
    let tag = r.read(4)?;
    let dim = r.read(28)? as usize;
    let param = r.read(32)?;
    let payload = match tag {
        TAG_DENSE32 => {
            if param != 32 {
                return Err(QuantizerError::Corrupt(format!(
                    "dense width {param} is not 32"
                )));
            }
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_bits(r.read(32)? as u32));
            }
            Payload::Dense(values)
        }
        TAG_QSGD => {
            if !(2..=32).contains(&param) {
                return Err(QuantizerError::Corrupt(format!(
                    "qsgd bit width {param} out of range"
                )));
            }
            let bits = param as u32;
            let norm = f32::from_bits(r.read(32)? as u32);
            let mag_bits = bits - 1;
            let mut levels = Vec::with_capacity(dim);
            for _ in 0..dim {
                let negative = r.read(1)? == 1;
                let mag = r.read(mag_bits)? as i64;
                levels.push(if negative { -mag } else { mag } as i32);
            }
            Payload::Qsgd { bits, norm, levels }
        }
        TAG_SPARSE => {
            let k = param as usize;
            if k > dim {
                return Err(QuantizerError::Corrupt(format!(
                    "sparse count {k} exceeds dimension {dim}"
                )));
            }
            let rescale = f32::from_bits(r.read(32)? as u32);
            let mut indices = Vec::with_capacity(k);
            let mut values = Vec::with_capacity(k);
            for _ in 0..k {
                let i = r.read(32)? as u32;
                if i as usize >= dim {
                    return Err(QuantizerError::Corrupt(format!(
                        "index {i} out of range for dimension {dim}"
                    )));
                }
                indices.push(i);
                values.push(f32::from_bits(r.read(32)? as u32));
            }
            Payload::Sparse {
                indices,
                values,
                rescale,
            }
        }
        other => {
            return Err(QuantizerError::Corrupt(format!(
                "unknown encoding tag {other:#x}"
            )))
        }
    };
    let msg = QuantizedMessage { dim, payload };
    let expected = encoded_bits(&msg);
    if bytes.len() as u64 != expected.div_ceil(8) {
        return Err(QuantizerError::Corrupt(format!(
            "payload is {} bytes, header implies {} bits",
            bytes.len(),
            expected
        )));
    }
    if r.read(r.remaining() as u32)? != 0 {
        return Err(QuantizerError::Corrupt("non-zero padding bits".into()));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_packs_msb_first() {
        let mut w = BitWriter::with_capacity_bits(12);
        w.push(0b1, 1);
        w.push(0b0110, 4);
        w.push(0b111, 3);
        w.push(0b1010, 4);
        let (bytes, bits) = w.finish();
        assert_eq!(bits, 12);
        assert_eq!(bytes, vec![0b1011_0111, 0b1010_0000]);
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read(5).unwrap(), 0b10110);
        assert_eq!(r.read(7).unwrap(), 0b1111010);
        assert_eq!(r.remaining(), 4);
    }

    #[test]
    fn dense_header_layout() {
        let msg = QuantizedMessage {
            dim: 1,
            payload: Payload::Dense(vec![0.25]),
        };
        let bytes = encode(&msg);
        assert_eq!(bytes.len(), 12);
        // tag 1, dim 1
        assert_eq!(&bytes[..4], &[0x10, 0x00, 0x00, 0x01]);
        assert_eq!(&bytes[4..8], &32u32.to_be_bytes());
        assert_eq!(&bytes[8..], &0.25f32.to_bits().to_be_bytes());
    }

    #[test]
    fn rejects_wrong_length_and_padding() {
        let msg = QuantizedMessage {
            dim: 3,
            payload: Payload::Qsgd {
                bits: 3,
                norm: 1.0,
                levels: vec![1, -2, 3],
            },
        };
        let mut bytes = encode(&msg);
        // 64 + 32 + 9 bits = 105 bits -> 14 bytes, 7 padding bits
        assert_eq!(bytes.len(), 14);
        assert_eq!(decode(&bytes).unwrap(), msg);
        *bytes.last_mut().unwrap() |= 0x01;
        assert!(matches!(decode(&bytes), Err(QuantizerError::Corrupt(_))));
        bytes.pop();
        assert!(decode(&bytes).is_err());
        let mut longer = encode(&msg);
        longer.push(0);
        assert!(decode(&longer).is_err());
    }

    #[test]
    fn rejects_unknown_tag_and_bad_index() {
        assert!(decode(&[0xF0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        let msg = QuantizedMessage {
            dim: 2,
            payload: Payload::Sparse {
                indices: vec![1],
                values: vec![1.0],
                rescale: 1.0,
            },
        };
        let mut bytes = encode(&msg);
        // overwrite the index with 5
        bytes[12..16].copy_from_slice(&5u32.to_be_bytes());
        assert!(decode(&bytes).is_err());
    }
}

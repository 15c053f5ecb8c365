//! Fixed-width bit packing of codeword indices, least significant bit first.

use crate::error::{dim_err, QcnnError, Result};

/// Bits per index for `k` codewords: `ceil(log2 k)`, zero when `k <= 1`.
pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedAssignments {
    bits: u32,
    count: usize,
    bytes: Vec<u8>,
}

impl PackedAssignments {
    pub fn byte_len(count: usize, bits: u32) -> usize {
        (count * bits as usize).div_ceil(8)
    }

    pub fn pack(indices: &[u16], codewords: usize) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= codewords.max(1)) {
            return dim_err(format!(
                "index {bad} out of range for {codewords} codewords"
            ));
        }
        let bits = index_bits(codewords);
        let mut bytes = vec![0u8; Self::byte_len(indices.len(), bits)];
        if bits > 0 {
            let mut pos = 0usize;
            for &v in indices {
                let v = v as u32;
                for j in 0..bits {
                    if v >> j & 1 == 1 {
                        bytes[pos / 8] |= 1 << (pos % 8);
                    }
                    pos += 1;
                }
            }
        }
        Ok(Self {
            bits,
            count: indices.len(),
            bytes,
        })
    }

    pub fn from_bytes(bytes: Vec<u8>, bits: u32, count: usize) -> Result<Self> {
        if bits > 16 {
            return Err(QcnnError::Format(format!(
                "{bits}-bit indices exceed 16 bits"
            )));
        }
        if bytes.len() != Self::byte_len(count, bits) {
            return Err(QcnnError::Format(format!(
                "{count} indices of {bits} bits need {} bytes, got {}",
                Self::byte_len(count, bits),
                bytes.len()
            )));
        }
        Ok(Self { bits, count, bytes })
    }

    pub fn unpack(&self) -> Vec<u16> {
        let mut out = Vec::with_capacity(self.count);
        let mut pos = 0usize;
        for _ in 0..self.count {
            let mut v = 0u16;
            for j in 0..self.bits {
                if self.bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                    v |= 1 << j;
                }
                pos += 1;
            }
            out.push(v);
        }
        out
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

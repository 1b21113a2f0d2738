use super::TrimaskError;

/// Packs bits MSB-first, padding the last byte with zeros.
pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], TrimaskError> {
        if self.bytes.len() < n {
            return Err(TrimaskError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub(crate) fn magic(&mut self) -> Result<[u8; 4], TrimaskError> {
        Ok(self.take(4)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, TrimaskError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, TrimaskError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, TrimaskError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn string(&mut self) -> Result<String, TrimaskError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrimaskError::Malformed("string is not UTF-8".into()))
    }

    pub(crate) fn finish(self) -> Result<(), TrimaskError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(TrimaskError::Malformed(format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

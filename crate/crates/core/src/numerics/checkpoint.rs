//! `SSCK` named-tensor container.
//!
//! Layout (little-endian): magic `SSCK`, u32 version, u32 tensor count, then
//! per tensor a u16-length-prefixed UTF-8 name, u8 rank, rank × u32 dims and
//! the raw f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{NumericsError, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

/// An ordered list of named f32 tensors as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore<f32>) -> Self {
        Self { tensors: params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| NumericsError::MissingTensors(vec![name.to_string()]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Appends every entry of `other`, e.g. to merge model and metadata records.
    pub fn extend(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<usize> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| NumericsError::Malformed(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        let rank = u8::try_from(t.rank()).map_err(|_| NumericsError::Malformed(format!("rank of {name}")))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(NumericsError::Malformed("truncated stream".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    source.read_to_end(&mut raw)?;
    let mut bytes = raw.as_slice();
    let magic: [u8; 4] = take(&mut bytes, 4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(NumericsError::BadMagic(magic));
    }
    let version = u32_at(&mut bytes)?;
    if version != VERSION {
        return Err(NumericsError::UnsupportedVersion(version));
    }
    let count = u32_at(&mut bytes)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut bytes, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut bytes, len)?)
            .map_err(|_| NumericsError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(&mut bytes, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut bytes)? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut bytes, numel * 4)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if !bytes.is_empty() {
        return Err(NumericsError::Malformed(format!("{} trailing bytes", bytes.len())));
    }
    Ok(Checkpoint { tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(ckpt, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.25]).unwrap());
        p.insert("a.bias", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn save_then_load_is_bitwise_equal() {
        let params = sample();
        let mut buf = Vec::new();
        write_checkpoint(&Checkpoint::from_params(&params), &mut buf).unwrap();
        let ckpt = read_checkpoint(buf.as_slice()).unwrap();
        let mut restored = sample();
        restored.get_mut(restored.id("a.bias").unwrap()).data_mut()[0] = 9.0;
        restored.load_from(ckpt.iter()).unwrap();
        for ((_, _, a), (_, _, b)) in params.iter().zip(restored.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn missing_name_is_listed() {
        let mut ckpt = Checkpoint::from_params(&sample());
        ckpt.tensors.retain(|(n, _)| n != "a.bias");
        let err = sample().load_from(ckpt.iter()).unwrap_err();
        assert!(err.to_string().contains("a.bias"), "{err}");
    }

    #[test]
    fn transposed_shape_is_rejected() {
        let mut ckpt = Checkpoint::from_params(&sample());
        let t = ckpt.tensors[0].1.clone().reshape(&[3, 2]).unwrap();
        ckpt.tensors[0].1 = t;
        let err = sample().load_from(ckpt.iter()).unwrap_err();
        assert!(matches!(err, NumericsError::TensorShape { .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&Checkpoint::from_params(&sample()), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(NumericsError::BadMagic(_))));
        buf.pop();
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(NumericsError::Malformed(_))));
    }
}

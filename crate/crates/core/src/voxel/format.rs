//! `SSV1` scene files.
//!
//! Little-endian: magic `SSV1`, u32 version (1), u32 X, u32 Y, u32 Z, u16 N,
//! N palette entries (u8 name length, name bytes, 3 × u8 RGB), then
//! `(u16 count, u16 label)` runs in x-fastest order until the counts cover
//! X·Y·Z voxels.

use std::io::{Read, Write};
use std::path::Path;

use super::{ClassPalette, VoxelError, VoxelGrid};

const MAGIC: &[u8; 4] = b"SSV1";
const VERSION: u32 = 1;

pub fn write_scene<W: Write>(grid: &VoxelGrid, palette: &ClassPalette, mut sink: W) -> Result<usize, VoxelError> {
    if palette.len() != grid.num_classes() as usize {
        return Err(VoxelError::Palette(format!(
            "{} palette entries for {} classes",
            palette.len(),
            grid.num_classes()
        )));
    }
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in grid.dims() {
        let d = u32::try_from(d).map_err(|_| VoxelError::Invalid(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&grid.num_classes().to_le_bytes());
    for (name, rgb) in palette.names.iter().zip(&palette.colors) {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(rgb);
    }
    let labels = grid.labels();
    let mut i = 0;
    while i < labels.len() {
        let label = labels[i];
        let mut run = 1usize;
        while i + run < labels.len() && labels[i + run] == label && run < u16::MAX as usize {
            run += 1;
        }
        buf.extend_from_slice(&(run as u16).to_le_bytes());
        buf.extend_from_slice(&label.to_le_bytes());
        i += run;
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_scene<R: Read>(mut source: R) -> Result<(VoxelGrid, ClassPalette), VoxelError> {
    let mut raw = Vec::new();
    source.read_to_end(&mut raw)?;
    let mut cur = Cursor { bytes: &raw };
    let magic: [u8; 4] = cur.take(4).ok_or(VoxelError::TruncatedHeader)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(VoxelError::BadMagic(magic));
    }
    let version = cur.u32().ok_or(VoxelError::TruncatedHeader)?;
    if version != VERSION {
        return Err(VoxelError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.u32().ok_or(VoxelError::TruncatedHeader)? as usize;
    }
    let n = cur.u16().ok_or(VoxelError::TruncatedHeader)?;
    let mut names = Vec::with_capacity(n as usize);
    let mut colors = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = cur.take(1).ok_or(VoxelError::TruncatedHeader)?[0] as usize;
        let name = cur.take(len).ok_or(VoxelError::TruncatedHeader)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| VoxelError::Palette("name is not UTF-8".into()))?;
        let rgb = cur.take(3).ok_or(VoxelError::TruncatedHeader)?;
        names.push(name);
        colors.push([rgb[0], rgb[1], rgb[2]]);
    }
    let palette = ClassPalette::new(names, colors)?;
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VoxelError::Invalid(format!("grid {dims:?} too large")))?;
    let mut labels = Vec::with_capacity(total.min(1 << 26));
    while labels.len() < total {
        let (Some(count), Some(label)) = (cur.u16(), cur.u16()) else {
            return Err(VoxelError::TruncatedVoxels);
        };
        if label >= n {
            return Err(VoxelError::LabelOutOfRange { label, num_classes: n });
        }
        if labels.len() + count as usize > total {
            return Err(VoxelError::RunOverflow { total });
        }
        labels.extend(std::iter::repeat_n(label, count as usize));
    }
    if !cur.bytes.is_empty() {
        return Err(VoxelError::TrailingBytes);
    }
    Ok((VoxelGrid::new(dims, n, labels)?, palette))
}

pub fn write_scene_file(grid: &VoxelGrid, palette: &ClassPalette, path: impl AsRef<Path>) -> Result<usize, VoxelError> {
    let file = std::fs::File::create(path)?;
    write_scene(grid, palette, std::io::BufWriter::new(file))
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<(VoxelGrid, ClassPalette), VoxelError> {
    read_scene(std::io::BufReader::new(std::fs::File::open(path)?))
}

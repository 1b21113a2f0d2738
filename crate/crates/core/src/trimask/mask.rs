use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::bits::{pack_bits, unpack_bits, Reader};
use super::TrimaskError;
use crate::voxel::VoxelGrid;

/// Axis-aligned box in mask cells, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bbox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Bbox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self, TrimaskError> {
        if (0..3).any(|i| lo[i] >= hi[i]) {
            return Err(TrimaskError::OutOfBounds(format!("degenerate bbox {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// The whole volume `dims`.
    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn size(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|i| self.hi[i] <= dims[i])
    }

    /// Translated copy, `None` if any corner would go negative.
    pub fn shifted(&self, offset: [i64; 3]) -> Option<Self> {
        let mut out = *self;
        for i in 0..3 {
            out.lo[i] = usize::try_from(self.lo[i] as i64 + offset[i]).ok()?;
            out.hi[i] = usize::try_from(self.hi[i] as i64 + offset[i]).ok()?;
        }
        Some(out)
    }
}

/// Binary plane stored row-major as `[rows][cols]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Plane {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Plane {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self, TrimaskError> {
        if bits.len() != rows * cols {
            return Err(TrimaskError::Malformed(format!("{} bits for a {rows}x{cols} plane", bits.len())));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn clear_rect(&mut self, r: std::ops::Range<usize>, c: std::ops::Range<usize>) {
        for i in r {
            for j in c.clone() {
                self.set(i, j, false);
            }
        }
    }

    /// ORs `src` shifted by `(dr, dc)`, dropping cells that leave the plane.
    fn or_shifted(&mut self, src: &Plane, dr: i64, dc: i64) {
        for r in 0..src.rows {
            for c in 0..src.cols {
                if !src.get(r, c) {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (0..self.rows as i64).contains(&nr) && (0..self.cols as i64).contains(&nc) {
                    self.set(nr as usize, nc as usize, true);
                }
            }
        }
    }

    fn map(&self, rows: usize, cols: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Plane {
        let mut out = Plane::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let (sr, sc) = f(r, c);
                out.set(r, c, self.get(sr, sc));
            }
        }
        out
    }

    /// Occupied row and column ranges, `None` when empty.
    fn extent(&self) -> Option<([usize; 2], [usize; 2])> {
        let mut lo = [usize::MAX; 2];
        let mut hi = [0usize; 2];
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    lo = [lo[0].min(r), lo[1].min(c)];
                    hi = [hi[0].max(r + 1), hi[1].max(c + 1)];
                }
            }
        }
        (lo[0] != usize::MAX).then_some((lo, hi))
    }
}

/// A class's three axis projections at mask resolution: `xy` is
/// `[X_m][Y_m]`, `xz` is `[X_m][Z_m]`, `yz` is `[Y_m][Z_m]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trimask {
    pub class_id: u16,
    dims: [usize; 3],
    pub xy: Plane,
    pub xz: Plane,
    pub yz: Plane,
}

impl Trimask {
    pub fn zeros(class_id: u16, dims: [usize; 3]) -> Self {
        let [x, y, z] = dims;
        Self { class_id, dims, xy: Plane::zeros(x, y), xz: Plane::zeros(x, z), yz: Plane::zeros(y, z) }
    }

    pub fn from_planes(class_id: u16, xy: Plane, xz: Plane, yz: Plane) -> Result<Self, TrimaskError> {
        let dims = [xy.rows, xy.cols, xz.cols];
        if xz.rows != dims[0] || yz.rows != dims[1] || yz.cols != dims[2] || dims.contains(&0) {
            return Err(TrimaskError::DimMismatch(format!(
                "planes {}x{}, {}x{}, {}x{} do not share X_m, Y_m, Z_m",
                xy.rows, xy.cols, xz.rows, xz.cols, yz.rows, yz.cols
            )));
        }
        Ok(Self { class_id, dims, xy, xz, yz })
    }

    /// Trimask of a filled box: the projections of a solid cuboid.
    pub fn solid_box(class_id: u16, dims: [usize; 3], bbox: Bbox) -> Result<Self, TrimaskError> {
        if !bbox.fits(dims) {
            return Err(TrimaskError::OutOfBounds(format!("{bbox:?} outside {dims:?}")));
        }
        let mut tm = Self::zeros(class_id, dims);
        for x in bbox.lo[0]..bbox.hi[0] {
            for y in bbox.lo[1]..bbox.hi[1] {
                tm.xy.set(x, y, true);
            }
            for z in bbox.lo[2]..bbox.hi[2] {
                tm.xz.set(x, z, true);
            }
        }
        for y in bbox.lo[1]..bbox.hi[1] {
            for z in bbox.lo[2]..bbox.hi[2] {
                tm.yz.set(y, z, true);
            }
        }
        Ok(tm)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn is_zero(&self) -> bool {
        self.xy.is_zero() && self.xz.is_zero() && self.yz.is_zero()
    }

    /// Tight box around the nonzero cells of all three planes. An axis no
    /// nonzero plane constrains spans the whole volume.
    pub fn bbox(&self) -> Option<Bbox> {
        if self.is_zero() {
            return None;
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut grow = |axes: [usize; 2], e: Option<([usize; 2], [usize; 2])>| {
            if let Some((l, h)) = e {
                for k in 0..2 {
                    lo[axes[k]] = lo[axes[k]].min(l[k]);
                    hi[axes[k]] = hi[axes[k]].max(h[k]);
                }
            }
        };
        grow([0, 1], self.xy.extent());
        grow([0, 2], self.xz.extent());
        grow([1, 2], self.yz.extent());
        for i in 0..3 {
            if lo[i] >= hi[i] {
                (lo[i], hi[i]) = (0, self.dims[i]);
            }
        }
        Some(Bbox { lo, hi })
    }

    /// ORs `other` shifted by `offset`, clipping at the borders.
    pub fn or_shifted(&mut self, other: &Trimask, offset: [i64; 3]) {
        let [dx, dy, dz] = offset;
        self.xy.or_shifted(&other.xy, dx, dy);
        self.xz.or_shifted(&other.xz, dx, dz);
        self.yz.or_shifted(&other.yz, dy, dz);
    }

    /// Zeroes the three planes inside the box's projections.
    pub fn clear(&mut self, bbox: Bbox) {
        let (x, y, z) = (bbox.lo[0]..bbox.hi[0], bbox.lo[1]..bbox.hi[1], bbox.lo[2]..bbox.hi[2]);
        self.xy.clear_rect(x.clone(), y.clone());
        self.xz.clear_rect(x, z.clone());
        self.yz.clear_rect(y, z);
    }

    pub fn union(&self, other: &Trimask) -> Result<Trimask, TrimaskError> {
        if self.dims != other.dims {
            return Err(TrimaskError::DimMismatch(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let mut out = self.clone();
        out.or_shifted(other, [0; 3]);
        Ok(out)
    }

    pub fn translate(&self, offset: [i64; 3]) -> Result<Trimask, TrimaskError> {
        if let Some(b) = self.bbox() {
            match b.shifted(offset) {
                Some(s) if s.fits(self.dims) => {}
                _ => return Err(TrimaskError::OutOfBounds(format!("translate {offset:?} moves {b:?} outside {:?}", self.dims))),
            }
        }
        let mut out = Trimask::zeros(self.class_id, self.dims);
        out.or_shifted(self, offset);
        Ok(out)
    }

    /// Quarter turn about z: voxel `(x, y, z)` moves to `(X-1-y, x, z)`.
    pub fn rotate90_z(&self) -> Result<Trimask, TrimaskError> {
        let [n, m, z] = self.dims;
        if n != m {
            return Err(TrimaskError::NonSquare(n, m));
        }
        Ok(Trimask {
            class_id: self.class_id,
            dims: self.dims,
            xy: self.xy.map(n, n, |x, y| (y, n - 1 - x)),
            xz: self.yz.map(n, z, |x, z| (n - 1 - x, z)),
            yz: self.xz.map(n, z, |y, z| (y, z)),
        })
    }

    pub fn mirror_x(&self) -> Trimask {
        let [n, m, z] = self.dims;
        Trimask {
            class_id: self.class_id,
            dims: self.dims,
            xy: self.xy.map(n, m, |x, y| (n - 1 - x, y)),
            xz: self.xz.map(n, z, |x, z| (n - 1 - x, z)),
            yz: self.yz.clone(),
        }
    }

    pub fn mirror_y(&self) -> Trimask {
        let [n, m, z] = self.dims;
        Trimask {
            class_id: self.class_id,
            dims: self.dims,
            xy: self.xy.map(n, m, |x, y| (x, m - 1 - y)),
            xz: self.xz.clone(),
            yz: self.yz.map(m, z, |y, z| (m - 1 - y, z)),
        }
    }
}

fn nearest(i: usize, from: usize, to: usize) -> usize {
    (((i as f64 + 0.5) * from as f64 / to as f64).floor() as usize).min(from - 1)
}

/// Nearest-neighbour resampling of every plane to `dims`.
pub fn resize_trimask(tm: &Trimask, dims: [usize; 3]) -> Result<Trimask, TrimaskError> {
    if dims.contains(&0) {
        return Err(TrimaskError::DimMismatch(format!("zero dimension in {dims:?}")));
    }
    let [ox, oy, oz] = tm.dims;
    let [nx, ny, nz] = dims;
    Ok(Trimask {
        class_id: tm.class_id,
        dims,
        xy: tm.xy.map(nx, ny, |x, y| (nearest(x, ox, nx), nearest(y, oy, ny))),
        xz: tm.xz.map(nx, nz, |x, z| (nearest(x, ox, nx), nearest(z, oz, nz))),
        yz: tm.yz.map(ny, nz, |y, z| (nearest(y, oy, ny), nearest(z, oz, nz))),
    })
}

/// Mask resolution of a grid under pooling factors `(d, d, d_z)`, rounding up.
pub fn mask_dims(grid_dims: [usize; 3], d: usize, d_z: usize) -> [usize; 3] {
    [grid_dims[0].div_ceil(d), grid_dims[1].div_ceil(d), grid_dims[2].div_ceil(d_z)]
}

/// Projections of one class, max-pooled by `(d, d, d_z)`.
pub fn decompose_class(grid: &VoxelGrid, class_id: u16, d: usize, d_z: usize) -> Result<Trimask, TrimaskError> {
    if class_id >= grid.num_classes() {
        return Err(TrimaskError::ClassOutOfRange { class_id, num_classes: grid.num_classes() });
    }
    if d == 0 || d_z == 0 {
        return Err(TrimaskError::DimMismatch("pooling factors must be positive".into()));
    }
    let mut tm = Trimask::zeros(class_id, mask_dims(grid.dims(), d, d_z));
    for (i, &l) in grid.labels().iter().enumerate() {
        if l == class_id {
            let [x, y, z] = grid.coords(i);
            let (x, y, z) = (x / d, y / d, z / d_z);
            tm.xy.set(x, y, true);
            tm.xz.set(x, z, true);
            tm.yz.set(y, z, true);
        }
    }
    Ok(tm)
}

/// One trimask per class id, empty class included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMaskSet {
    dims: [usize; 3],
    masks: Vec<Trimask>,
}

const SET_MAGIC: &[u8; 4] = b"TMSS";
const SET_VERSION: u32 = 1;

impl SceneMaskSet {
    pub fn empty(num_classes: u16, dims: [usize; 3]) -> Self {
        Self { dims, masks: (0..num_classes).map(|c| Trimask::zeros(c, dims)).collect() }
    }

    pub fn from_masks(masks: Vec<Trimask>) -> Result<Self, TrimaskError> {
        let dims = masks.first().ok_or_else(|| TrimaskError::Malformed("no trimasks".into()))?.dims;
        for (c, m) in masks.iter().enumerate() {
            if m.dims != dims {
                return Err(TrimaskError::DimMismatch(format!("class {c}: {:?} vs {dims:?}", m.dims)));
            }
            if m.class_id as usize != c {
                return Err(TrimaskError::Malformed(format!("trimask {c} carries class {}", m.class_id)));
            }
        }
        Ok(Self { dims, masks })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.masks.len() as u16
    }

    pub fn masks(&self) -> &[Trimask] {
        &self.masks
    }

    pub fn class(&self, c: u16) -> Result<&Trimask, TrimaskError> {
        self.masks.get(c as usize).ok_or(TrimaskError::ClassOutOfRange { class_id: c, num_classes: self.num_classes() })
    }

    pub fn class_mut(&mut self, c: u16) -> Result<&mut Trimask, TrimaskError> {
        let n = self.num_classes();
        self.masks.get_mut(c as usize).ok_or(TrimaskError::ClassOutOfRange { class_id: c, num_classes: n })
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<(), TrimaskError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SET_MAGIC);
        buf.extend_from_slice(&SET_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.num_classes().to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for m in &self.masks {
            for p in [&m.xy, &m.xz, &m.yz] {
                buf.extend_from_slice(&pack_bits(&p.bits));
            }
        }
        sink.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self, TrimaskError> {
        let mut raw = Vec::new();
        source.read_to_end(&mut raw)?;
        let mut r = Reader::new(&raw);
        let magic = r.magic()?;
        if &magic != SET_MAGIC {
            return Err(TrimaskError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != SET_VERSION {
            return Err(TrimaskError::UnsupportedVersion(version));
        }
        let n = r.u16()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if n == 0 || dims.contains(&0) {
            return Err(TrimaskError::Malformed("empty mask set".into()));
        }
        let [x, y, z] = dims;
        let mut masks = Vec::with_capacity(n as usize);
        for c in 0..n {
            let xy = Plane::from_bits(x, y, unpack_bits(r.take((x * y).div_ceil(8))?, x * y))?;
            let xz = Plane::from_bits(x, z, unpack_bits(r.take((x * z).div_ceil(8))?, x * z))?;
            let yz = Plane::from_bits(y, z, unpack_bits(r.take((y * z).div_ceil(8))?, y * z))?;
            masks.push(Trimask::from_planes(c, xy, xz, yz)?);
        }
        r.finish()?;
        Self::from_masks(masks)
    }
}

pub fn decompose_scene(grid: &VoxelGrid, d: usize, d_z: usize) -> Result<SceneMaskSet, TrimaskError> {
    let masks = (0..grid.num_classes()).map(|c| decompose_class(grid, c, d, d_z)).collect::<Result<_, _>>()?;
    SceneMaskSet::from_masks(masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PasteMode {
    Union,
    Replace,
}

/// Places `asset` (in its own mask frame) into `target` shifted by `offset`.
pub fn paste_trimask(
    target: &SceneMaskSet,
    asset: &Trimask,
    offset: [i64; 3],
    mode: PasteMode,
) -> Result<SceneMaskSet, TrimaskError> {
    let Some(bbox) = asset.bbox() else {
        return Ok(target.clone());
    };
    let placed = bbox
        .shifted(offset)
        .filter(|b| b.fits(target.dims))
        .ok_or_else(|| TrimaskError::OutOfBounds(format!("{bbox:?} shifted by {offset:?} leaves {:?}", target.dims)))?;
    let mut out = target.clone();
    let tm = out.class_mut(asset.class_id)?;
    if mode == PasteMode::Replace {
        tm.clear(placed);
    }
    tm.or_shifted(asset, offset);
    Ok(out)
}

pub fn erase_region(target: &SceneMaskSet, class_id: u16, bbox: Bbox) -> Result<SceneMaskSet, TrimaskError> {
    if !bbox.fits(target.dims) {
        return Err(TrimaskError::OutOfBounds(format!("{bbox:?} outside {:?}", target.dims)));
    }
    let mut out = target.clone();
    out.class_mut(class_id)?.clear(bbox);
    Ok(out)
}

/// Widens a straight road by `cells` on each side, copying its trimask
/// outward across the road direction.
pub fn widen_road(target: &SceneMaskSet, road_class: u16, cells: usize) -> Result<SceneMaskSet, TrimaskError> {
    let road = target.class(road_class)?.clone();
    let Some(b) = road.bbox() else {
        return Err(TrimaskError::Malformed(format!("class {road_class} has no mask to widen")));
    };
    let [sx, sy, _] = b.size();
    let across = if sx >= sy { 1 } else { 0 };
    let mut out = target.clone();
    let tm = out.class_mut(road_class)?;
    for s in 1..=cells as i64 {
        for sign in [-1, 1] {
            let mut offset = [0i64; 3];
            offset[across] = sign * s;
            tm.or_shifted(&road, offset);
        }
    }
    Ok(out)
}

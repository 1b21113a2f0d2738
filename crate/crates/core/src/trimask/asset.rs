use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bits::{pack_bits, unpack_bits, Reader};
use super::mask::{decompose_class, resize_trimask, Bbox, Plane, Trimask};
use super::TrimaskError;
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssetKind {
    SceneLevel,
    Basic,
}

impl std::str::FromStr for AssetKind {
    type Err = TrimaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scene-level" | "scene" => Ok(Self::SceneLevel),
            "basic" => Ok(Self::Basic),
            other => Err(TrimaskError::Malformed(format!("unknown asset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Translate([i64; 3]),
    Rotate90Z,
    MirrorX,
    MirrorY,
}

/// A named trimask with its tight bounding box.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub id: String,
    pub kind: AssetKind,
    trimask: Trimask,
    bbox: Bbox,
    pub provenance: String,
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl AssetRecord {
    pub fn new(id: impl Into<String>, kind: AssetKind, trimask: Trimask, provenance: impl Into<String>) -> Result<Self, TrimaskError> {
        let id = id.into();
        if !valid_id(&id) {
            return Err(TrimaskError::InvalidId(id));
        }
        let bbox = trimask.bbox().ok_or_else(|| TrimaskError::EmptyAsset(id.clone()))?;
        Ok(Self { id, kind, trimask, bbox, provenance: provenance.into() })
    }

    pub fn class_id(&self) -> u16 {
        self.trimask.class_id
    }

    pub fn trimask(&self) -> &Trimask {
        &self.trimask
    }

    pub fn bbox(&self) -> Bbox {
        self.bbox
    }

    pub fn dims(&self) -> [usize; 3] {
        self.trimask.dims()
    }

    fn with_trimask(&self, trimask: Trimask) -> Result<Self, TrimaskError> {
        Self::new(self.id.clone(), self.kind, trimask, self.provenance.clone())
    }

    pub fn transform(&self, op: Transform) -> Result<Self, TrimaskError> {
        let tm = match op {
            Transform::Translate(o) => self.trimask.translate(o)?,
            Transform::Rotate90Z => self.trimask.rotate90_z()?,
            Transform::MirrorX => self.trimask.mirror_x(),
            Transform::MirrorY => self.trimask.mirror_y(),
        };
        self.with_trimask(tm)
    }

    pub fn resized(&self, dims: [usize; 3]) -> Result<Self, TrimaskError> {
        self.with_trimask(resize_trimask(&self.trimask, dims)?)
    }

    /// Basic asset cut from the voxels of `class_id` inside `region` (grid
    /// coordinates), expressed in the full-scene mask frame.
    pub fn from_region(
        id: impl Into<String>,
        grid: &VoxelGrid,
        class_id: u16,
        region: Bbox,
        d: usize,
        d_z: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, TrimaskError> {
        if !region.fits(grid.dims()) {
            return Err(TrimaskError::OutOfBounds(format!("{region:?} outside {:?}", grid.dims())));
        }
        let mut labels = grid.labels().to_vec();
        for (i, l) in labels.iter_mut().enumerate() {
            let p = grid.coords(i);
            if !(0..3).all(|k| (region.lo[k]..region.hi[k]).contains(&p[k])) {
                *l = 0;
            }
        }
        let cropped = VoxelGrid::new(grid.dims(), grid.num_classes(), labels)?;
        Self::new(id, AssetKind::Basic, decompose_class(&cropped, class_id, d, d_z)?, provenance)
    }
}

pub fn transform_asset(asset: &AssetRecord, op: Transform) -> Result<AssetRecord, TrimaskError> {
    asset.transform(op)
}

const ASSET_MAGIC: &[u8; 4] = b"TMSK";
const ASSET_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// `TMSK` container: magic, u32 version, u16 class, 3×u32 dims, the xy/xz/yz
/// planes bit-packed (each padded to a byte), 6×u32 bbox (lo then exclusive
/// hi), u8 kind, then u16-length-prefixed id and provenance.
pub fn write_asset<W: Write>(asset: &AssetRecord, mut sink: W) -> Result<(), TrimaskError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ASSET_MAGIC);
    buf.extend_from_slice(&ASSET_VERSION.to_le_bytes());
    buf.extend_from_slice(&asset.class_id().to_le_bytes());
    for d in asset.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let tm = &asset.trimask;
    for p in [&tm.xy, &tm.xz, &tm.yz] {
        buf.extend_from_slice(&pack_bits(p.bits()));
    }
    for v in asset.bbox.lo.iter().chain(&asset.bbox.hi) {
        buf.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    buf.push(match asset.kind {
        AssetKind::SceneLevel => 0,
        AssetKind::Basic => 1,
    });
    put_str(&mut buf, &asset.id);
    put_str(&mut buf, &asset.provenance);
    sink.write_all(&buf)?;
    Ok(())
}

pub fn asset_to_bytes(asset: &AssetRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    write_asset(asset, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_asset<R: Read>(mut source: R) -> Result<AssetRecord, TrimaskError> {
    let mut raw = Vec::new();
    source.read_to_end(&mut raw)?;
    let mut r = Reader::new(&raw);
    let magic = r.magic()?;
    if &magic != ASSET_MAGIC {
        return Err(TrimaskError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != ASSET_VERSION {
        return Err(TrimaskError::UnsupportedVersion(version));
    }
    let class_id = r.u16()?;
    let [x, y, z] = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let xy = Plane::from_bits(x, y, unpack_bits(r.take((x * y).div_ceil(8))?, x * y))?;
    let xz = Plane::from_bits(x, z, unpack_bits(r.take((x * z).div_ceil(8))?, x * z))?;
    let yz = Plane::from_bits(y, z, unpack_bits(r.take((y * z).div_ceil(8))?, y * z))?;
    let mut b = [0usize; 6];
    for v in &mut b {
        *v = r.u32()? as usize;
    }
    let kind = match r.u8()? {
        0 => AssetKind::SceneLevel,
        1 => AssetKind::Basic,
        k => return Err(TrimaskError::Malformed(format!("asset kind byte {k}"))),
    };
    let id = r.string()?;
    let provenance = r.string()?;
    r.finish()?;
    let record = AssetRecord::new(id, kind, Trimask::from_planes(class_id, xy, xz, yz)?, provenance)?;
    let stored = Bbox { lo: [b[0], b[1], b[2]], hi: [b[3], b[4], b[5]] };
    if stored != record.bbox {
        return Err(TrimaskError::Malformed(format!("stored bbox {stored:?} is not tight ({:?})", record.bbox)));
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub class_id: u16,
    pub kind: AssetKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetFilter {
    pub class_id: Option<u16>,
    pub kind: Option<AssetKind>,
}

impl AssetFilter {
    pub fn matches(&self, e: &ManifestEntry) -> bool {
        self.class_id.is_none_or(|c| c == e.class_id) && self.kind.is_none_or(|k| k == e.kind)
    }
}

/// Directory of `.tmsk` files indexed by `manifest.json`. Writes need
/// `&mut self`; share behind a lock for concurrent readers.
#[derive(Debug)]
pub struct AssetLibrary {
    root: PathBuf,
    entries: BTreeMap<String, ManifestEntry>,
}

const MANIFEST: &str = "manifest.json";

impl AssetLibrary {
    /// Opens `root`, creating an empty library if it does not exist.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, TrimaskError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let manifest = root.join(MANIFEST);
        let entries = if manifest.exists() {
            let list: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(&manifest)?)?;
            list.into_iter().map(|e| (e.id.clone(), e)).collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn put(&mut self, asset: &AssetRecord) -> Result<ManifestEntry, TrimaskError> {
        if self.entries.contains_key(&asset.id) {
            return Err(TrimaskError::DuplicateId(asset.id.clone()));
        }
        let file = format!("{}.tmsk", asset.id);
        let tmp = self.root.join(format!(".{file}.tmp"));
        std::fs::write(&tmp, asset_to_bytes(asset))?;
        std::fs::rename(&tmp, self.root.join(&file))?;
        let entry = ManifestEntry { id: asset.id.clone(), path: file, class_id: asset.class_id(), kind: asset.kind };
        self.entries.insert(asset.id.clone(), entry.clone());
        if let Err(e) = self.save_manifest() {
            self.entries.remove(&asset.id);
            return Err(e);
        }
        Ok(entry)
    }

    pub fn get(&self, id: &str) -> Result<AssetRecord, TrimaskError> {
        let entry = self.entries.get(id).ok_or_else(|| TrimaskError::MissingId(id.to_string()))?;
        read_asset(std::fs::File::open(self.root.join(&entry.path))?)
    }

    /// Raw container bytes of a stored asset.
    pub fn get_bytes(&self, id: &str) -> Result<Vec<u8>, TrimaskError> {
        let entry = self.entries.get(id).ok_or_else(|| TrimaskError::MissingId(id.to_string()))?;
        Ok(std::fs::read(self.root.join(&entry.path))?)
    }

    pub fn list(&self, filter: AssetFilter) -> Vec<ManifestEntry> {
        self.entries.values().filter(|e| filter.matches(e)).cloned().collect()
    }

    fn save_manifest(&self) -> Result<(), TrimaskError> {
        let list: Vec<&ManifestEntry> = self.entries.values().collect();
        let tmp = self.root.join(".manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&list)?)?;
        std::fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(())
    }
}

//! Per-class trimasks: decomposition of labeled scenes into binary axis
//! projections, the editing algebra over them, and a file-backed asset library.

mod asset;
mod bits;
mod mask;

pub use asset::{
    asset_to_bytes, read_asset, transform_asset, write_asset, AssetFilter, AssetKind, AssetLibrary, AssetRecord,
    ManifestEntry, Transform,
};
pub use mask::{
    decompose_class, decompose_scene, erase_region, mask_dims, paste_trimask, resize_trimask, widen_road, Bbox,
    PasteMode, Plane, SceneMaskSet, Trimask,
};

use thiserror::Error;

use crate::voxel::VoxelError;

/// Horizontal pooling factor between grid and mask resolution.
pub const DEFAULT_D: usize = 2;
/// Vertical pooling factor.
pub const DEFAULT_D_Z: usize = 1;

#[derive(Debug, Error)]
pub enum TrimaskError {
    #[error("class {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: u16, num_classes: u16 },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("rotate90_z needs a square xy plane, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("asset {0} has an empty trimask")]
    EmptyAsset(String),
    #[error("invalid asset id {0:?}")]
    InvalidId(String),
    #[error("duplicate asset id {0}")]
    DuplicateId(String),
    #[error("no asset with id {0}")]
    MissingId(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream")]
    Truncated,
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Places a library asset into `target` at `offset`.
pub fn paste_asset(
    target: &SceneMaskSet,
    asset: &AssetRecord,
    offset: [i64; 3],
    mode: PasteMode,
) -> Result<SceneMaskSet, TrimaskError> {
    paste_trimask(target, asset.trimask(), offset, mode)
}

/// Scene-level assets for every non-empty class present in `grid`, named
/// `{prefix}-{class}`.
pub fn scene_assets(
    grid: &crate::voxel::VoxelGrid,
    prefix: &str,
    class_names: &[String],
    d: usize,
    d_z: usize,
) -> Result<Vec<AssetRecord>, TrimaskError> {
    let set = decompose_scene(grid, d, d_z)?;
    set.masks()
        .iter()
        .skip(1)
        .filter(|m| !m.is_zero())
        .map(|m| {
            let name = class_names.get(m.class_id as usize).cloned().unwrap_or_else(|| format!("class{}", m.class_id));
            AssetRecord::new(format!("{prefix}-{name}"), AssetKind::SceneLevel, m.clone(), format!("decomposed from {prefix}"))
        })
        .collect()
}

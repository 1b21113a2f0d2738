//! Durable on-disk store: the asset library plus content-addressed scenes and
//! mask sets, and one JSON record per job.
//!
//! ```text
//! root/manifest.json, *.tmsk   asset library
//! root/scenes/sc-<hash>.ssv    SSV1 scenes
//! root/masksets/ms-<hash>.tmss mask sets
//! root/jobs/<id>.json          job records
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use sha2::{Digest, Sha256};
use ssed::trimask::{AssetFilter, AssetLibrary, AssetRecord, ManifestEntry, SceneMaskSet, TrimaskError};
use ssed::voxel::{read_scene, write_scene, ClassPalette, VoxelError, VoxelGrid, TOY_CLASS_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown {kind} {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error(transparent)]
    Trimask(#[from] TrimaskError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error("job record: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Store {
    root: PathBuf,
    assets: RwLock<AssetLibrary>,
}

const HASH_HEX: usize = 24;

fn content_id(prefix: &str, bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("{prefix}-{}", &hex[..HASH_HEX])
}

/// Ids become file names, so only `[A-Za-z0-9_-]` is accepted.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// Writes through a temporary file and a rename so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Toy names for 8-class scenes, generic names otherwise.
pub fn palette_for(num_classes: u16) -> ClassPalette {
    if num_classes as usize == TOY_CLASS_NAMES.len() {
        ClassPalette::toy()
    } else {
        ClassPalette::generic(num_classes)
    }
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let assets = AssetLibrary::open(&root)?;
        for sub in ["scenes", "masksets", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root, assets: RwLock::new(assets) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn list_assets(&self, filter: AssetFilter) -> Vec<ManifestEntry> {
        self.assets.read().unwrap().list(filter)
    }

    pub fn put_asset(&self, asset: &AssetRecord) -> Result<ManifestEntry, StoreError> {
        check_id(&asset.id)?;
        Ok(self.assets.write().unwrap().put(asset)?)
    }

    pub fn get_asset(&self, id: &str) -> Result<AssetRecord, StoreError> {
        self.assets.read().unwrap().get(id).map_err(|e| asset_err(e, id))
    }

    pub fn get_asset_bytes(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.assets.read().unwrap().get_bytes(id).map_err(|e| asset_err(e, id))
    }

    fn path(&self, dir: &str, id: &str, ext: &str) -> Result<PathBuf, StoreError> {
        check_id(id)?;
        Ok(self.root.join(dir).join(format!("{id}.{ext}")))
    }

    fn put_blob(&self, dir: &str, prefix: &str, ext: &str, bytes: &[u8]) -> Result<String, StoreError> {
        let id = content_id(prefix, bytes);
        let path = self.path(dir, &id, ext)?;
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    fn get_blob(&self, dir: &str, kind: &'static str, id: &str, ext: &str) -> Result<Vec<u8>, StoreError> {
        match fs::read(self.path(dir, id, ext)?) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StoreError::NotFound { kind, id: id.into() }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put_scene(&self, grid: &VoxelGrid) -> Result<String, StoreError> {
        let mut bytes = Vec::new();
        write_scene(grid, &palette_for(grid.num_classes()), &mut bytes)?;
        self.put_blob("scenes", "sc", "ssv", &bytes)
    }

    /// Stores SSV1 bytes after checking they parse.
    pub fn put_scene_bytes(&self, bytes: &[u8]) -> Result<String, StoreError> {
        read_scene(bytes)?;
        self.put_blob("scenes", "sc", "ssv", bytes)
    }

    pub fn get_scene_bytes(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.get_blob("scenes", "scene", id, "ssv")
    }

    pub fn get_scene(&self, id: &str) -> Result<(VoxelGrid, ClassPalette), StoreError> {
        Ok(read_scene(self.get_scene_bytes(id)?.as_slice())?)
    }

    pub fn put_maskset(&self, set: &SceneMaskSet) -> Result<String, StoreError> {
        self.put_blob("masksets", "ms", "tmss", &set.to_bytes())
    }

    pub fn get_maskset_bytes(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.get_blob("masksets", "mask set", id, "tmss")
    }

    pub fn get_maskset(&self, id: &str) -> Result<SceneMaskSet, StoreError> {
        Ok(SceneMaskSet::read(self.get_maskset_bytes(id)?.as_slice())?)
    }

    pub fn put_job<T: serde::Serialize>(&self, id: &str, record: &T) -> Result<(), StoreError> {
        let path = self.path("jobs", id, "json")?;
        write_atomic(&path, &serde_json::to_vec_pretty(record)?)?;
        Ok(())
    }

    /// Every persisted job record.
    pub fn load_jobs<T: serde::de::DeserializeOwned>(&self) -> Result<Vec<T>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(serde_json::from_slice(&fs::read(path)?)?);
            }
        }
        Ok(out)
    }
}

fn asset_err(e: TrimaskError, id: &str) -> StoreError {
    match e {
        TrimaskError::MissingId(_) => StoreError::NotFound { kind: "asset", id: id.into() },
        other => other.into(),
    }
}

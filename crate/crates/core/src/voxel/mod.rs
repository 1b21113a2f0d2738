//! Labeled voxel scenes: representation, `SSV1` persistence, occupancy
//! metrics and a procedural toy-city generator.

mod format;
mod metrics;
mod toy;

pub use format::{read_scene, read_scene_file, write_scene, write_scene_file};
pub use metrics::{iou, miou, per_class_iou, IouAccumulator};
pub use toy::{
    generate_toy_scene, generate_toy_set, ToyDensities, ToySceneSpec, BUILDING, PEDESTRIAN, POLE, ROAD, SIDEWALK, TOY_CLASS_NAMES,
    VEGETATION, VEHICLE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class id reserved for empty / free space.
pub const EMPTY: u16 = 0;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("bad magic {0:?}, expected SSV1")]
    BadMagic([u8; 4]),
    #[error("unsupported scene version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated voxel data")]
    TruncatedVoxels,
    #[error("label out of range: {label} with {num_classes} classes")]
    LabelOutOfRange { label: u16, num_classes: u16 },
    #[error("run overflows the grid ({total} voxels)")]
    RunOverflow { total: usize },
    #[error("trailing bytes after voxel payload")]
    TrailingBytes,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(u16, u16),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("invalid palette: {0}")]
    Palette(String),
    #[error("toy scene: {0}")]
    ToySpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense labeled occupancy grid, row-major with x fastest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGrid {
    dims: [usize; 3],
    num_classes: u16,
    labels: Vec<u16>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], num_classes: u16, labels: Vec<u16>) -> Result<Self, VoxelError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VoxelError::Invalid(format!("zero dimension in {dims:?}")));
        }
        if num_classes < 2 {
            return Err(VoxelError::Invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        let total = dims.iter().product::<usize>();
        if labels.len() != total {
            return Err(VoxelError::Invalid(format!("{} labels for {total} voxels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(VoxelError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { dims, num_classes, labels })
    }

    /// All-empty grid.
    pub fn empty(dims: [usize; 3], num_classes: u16) -> Result<Self, VoxelError> {
        Self::new(dims, num_classes, vec![EMPTY; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    /// Sets one voxel. Panics if `label` is out of range.
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        assert!(label < self.num_classes, "label {label} out of range");
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn class_count(&self, class: u16) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY).count()
    }

    /// Non-empty voxels as `(x, y, z, class)`.
    pub fn sparse(&self) -> Vec<[usize; 4]> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != EMPTY)
            .map(|(i, &l)| {
                let [x, y, z] = self.coords(i);
                [x, y, z, l as usize]
            })
            .collect()
    }
}

/// Display names and colors for each class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

impl ClassPalette {
    pub fn new(names: Vec<String>, colors: Vec<[u8; 3]>) -> Result<Self, VoxelError> {
        if names.len() != colors.len() {
            return Err(VoxelError::Palette(format!("{} names, {} colors", names.len(), colors.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.len() > u8::MAX as usize {
                return Err(VoxelError::Palette(format!("name longer than 255 bytes: {n}")));
            }
            if !seen.insert(n) {
                return Err(VoxelError::Palette(format!("duplicate name {n}")));
            }
        }
        Ok(Self { names, colors })
    }

    /// Palette of the toy-city classes.
    pub fn toy() -> Self {
        let colors = vec![
            [0, 0, 0],
            [255, 0, 255],
            [75, 0, 75],
            [255, 200, 0],
            [100, 150, 245],
            [255, 30, 30],
            [0, 175, 0],
            [255, 240, 150],
        ];
        Self::new(TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect(), colors).expect("static palette")
    }

    /// Generic `class_i` names with a fixed color ramp.
    pub fn generic(n: u16) -> Self {
        let names = (0..n).map(|i| format!("class_{i}")).collect();
        let colors = (0..n as u32).map(|i| [(i * 67 % 256) as u8, (i * 131 % 256) as u8, (i * 29 % 256) as u8]).collect();
        Self::new(names, colors).expect("unique names")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

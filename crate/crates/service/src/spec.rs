//! Scene specifications: library assets placed with poses, followed by an
//! ordered list of painted mask edits.

use serde::{Deserialize, Serialize};
use ssed::trimask::{
    erase_region, paste_asset, widen_road, AssetRecord, Bbox, PasteMode, SceneMaskSet, Transform, Trimask, TrimaskError,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pose {
    /// Translation in mask cells, applied last.
    pub offset: [i64; 3],
    /// Quarter turns about z.
    pub rotate: u8,
    pub mirror_x: bool,
    pub mirror_y: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub asset: String,
    #[serde(default)]
    pub pose: Pose,
    #[serde(default = "union")]
    pub mode: PasteMode,
}

fn union() -> PasteMode {
    PasteMode::Union
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum MaskEdit {
    /// Paints a solid box of `class`.
    Add { class: u16, bbox: Bbox },
    /// Clears `class` inside the box's projections.
    Erase { class: u16, bbox: Bbox },
    /// Widens the road band by `cells` per side, or scales its width by `factor`.
    WidenRoad {
        class: u16,
        #[serde(default)]
        cells: Option<usize>,
        #[serde(default)]
        factor: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Target mask dims `(X_m, Y_m, Z_m)`.
    pub dims: [usize; 3],
    pub num_classes: u16,
    #[serde(default)]
    pub base: Vec<Placement>,
    #[serde(default)]
    pub edits: Vec<MaskEdit>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("unknown asset {0}")]
    MissingAsset(String),
    #[error(transparent)]
    Trimask(#[from] TrimaskError),
}

impl Pose {
    pub fn apply(&self, asset: &AssetRecord) -> Result<AssetRecord, TrimaskError> {
        let mut a = asset.clone();
        if self.mirror_x {
            a = a.transform(Transform::MirrorX)?;
        }
        if self.mirror_y {
            a = a.transform(Transform::MirrorY)?;
        }
        for _ in 0..self.rotate % 4 {
            a = a.transform(Transform::Rotate90Z)?;
        }
        Ok(a)
    }
}

/// Cells to add across a road band of `width` cells to scale it by `factor`.
pub fn widen_cells(width: usize, factor: f64) -> usize {
    ((factor - 1.0).max(0.0) * width as f64).round() as usize
}

/// Grows the road band by `extra` cells in total: half on each side, the odd
/// one on the high side.
pub fn widen_road_by(set: &SceneMaskSet, class: u16, extra: usize) -> Result<SceneMaskSet, TrimaskError> {
    let mut out = widen_road(set, class, extra / 2)?;
    if extra % 2 == 1 {
        let road = set.class(class)?.clone();
        let [sx, sy, _] = road.bbox().map(|b| b.size()).unwrap_or_default();
        let mut offset = [0i64; 3];
        offset[if sx >= sy { 1 } else { 0 }] = (extra / 2 + 1) as i64;
        out.class_mut(class)?.or_shifted(&road, offset);
    }
    Ok(out)
}

/// Road band width: the smaller horizontal extent of its xy footprint.
pub fn road_width(set: &SceneMaskSet, class: u16) -> Result<usize, TrimaskError> {
    let b = set
        .class(class)?
        .bbox()
        .ok_or_else(|| TrimaskError::Malformed(format!("class {class} has no mask to widen")))?;
    let [sx, sy, _] = b.size();
    Ok(sx.min(sy))
}

pub fn apply_edit(set: &SceneMaskSet, edit: &MaskEdit) -> Result<SceneMaskSet, SpecError> {
    Ok(match *edit {
        MaskEdit::Add { class, bbox } => {
            if !bbox.fits(set.dims()) {
                return Err(SpecError::Invalid(format!("bbox {bbox:?} outside {:?}", set.dims())));
            }
            let tm = Trimask::solid_box(class, set.dims(), bbox)?;
            let mut out = set.clone();
            out.class_mut(class)?.or_shifted(&tm, [0; 3]);
            out
        }
        MaskEdit::Erase { class, bbox } => erase_region(set, class, bbox)?,
        MaskEdit::WidenRoad { class, cells, factor } => {
            match (cells, factor) {
                (Some(c), None) => widen_road(set, class, c)?,
                (None, Some(f)) if f >= 1.0 => widen_road_by(set, class, widen_cells(road_width(set, class)?, f))?,
                _ => return Err(SpecError::Invalid("widen-road needs exactly one of cells or factor ≥ 1".into())),
            }
        }
    })
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.dims.contains(&0) || self.num_classes < 2 {
            return Err(SpecError::Invalid(format!("dims {:?} with {} classes", self.dims, self.num_classes)));
        }
        Ok(())
    }

    /// Places the base assets in order, then replays the edits.
    pub fn compose(
        &self,
        mut lookup: impl FnMut(&str) -> Result<AssetRecord, SpecError>,
    ) -> Result<SceneMaskSet, SpecError> {
        self.validate()?;
        let mut set = SceneMaskSet::empty(self.num_classes, self.dims);
        for p in &self.base {
            let asset = p.pose.apply(&lookup(&p.asset)?)?;
            if asset.class_id() >= self.num_classes {
                return Err(SpecError::Invalid(format!("asset {} has class {}", asset.id, asset.class_id())));
            }
            set = paste_asset(&set, &asset, p.pose.offset, p.mode)?;
        }
        for e in &self.edits {
            set = apply_edit(&set, e)?;
        }
        Ok(set)
    }
}

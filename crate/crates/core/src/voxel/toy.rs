//! Deterministic toy city blocks standing in for real driving scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{VoxelError, VoxelGrid, EMPTY};

pub const TOY_CLASS_NAMES: [&str; 8] = ["empty", "road", "sidewalk", "building", "vehicle", "pedestrian", "vegetation", "pole"];

pub const ROAD: u16 = 1;
pub const SIDEWALK: u16 = 2;
pub const BUILDING: u16 = 3;
pub const VEHICLE: u16 = 4;
pub const PEDESTRIAN: u16 = 5;
pub const VEGETATION: u16 = 6;
pub const POLE: u16 = 7;

const MIN_DIMS: [usize; 3] = [16, 16, 4];
const ATTEMPTS: usize = 400;

/// Target fraction of all voxels taken by each class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDensities {
    pub road: f64,
    pub sidewalk: f64,
    pub building: f64,
    pub vehicle: f64,
    pub pedestrian: f64,
    pub vegetation: f64,
    pub pole: f64,
}

impl Default for ToyDensities {
    fn default() -> Self {
        Self {
            road: 0.03,
            sidewalk: 0.0156,
            building: 0.12,
            vehicle: 0.008,
            pedestrian: 0.002,
            vegetation: 0.012,
            pole: 0.002,
        }
    }
}

impl ToyDensities {
    /// Density of class `c`, zero for empty or unknown ids.
    pub fn of(&self, c: u16) -> f64 {
        match c {
            ROAD => self.road,
            SIDEWALK => self.sidewalk,
            BUILDING => self.building,
            VEHICLE => self.vehicle,
            PEDESTRIAN => self.pedestrian,
            VEGETATION => self.vegetation,
            POLE => self.pole,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    pub dims: [usize; 3],
    pub num_classes: u16,
    pub densities: ToyDensities,
    pub seed: u64,
}

impl ToySceneSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        Self { dims, num_classes: TOY_CLASS_NAMES.len() as u16, densities: ToyDensities::default(), seed }
    }

    /// Same spec, different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self::new([32, 32, 8], 0)
    }
}

struct Canvas {
    grid: VoxelGrid,
    /// Road runs along x when true.
    along_x: bool,
}

impl Canvas {
    /// Maps (along, across) road-frame coordinates to (x, y).
    fn xy(&self, a: usize, c: usize) -> (usize, usize) {
        if self.along_x {
            (a, c)
        } else {
            (c, a)
        }
    }

    fn free_box(&self, lo: [usize; 3], size: [usize; 3]) -> bool {
        let d = self.grid.dims();
        if (0..3).any(|i| lo[i] + size[i] > d[i]) {
            return false;
        }
        for z in lo[2]..lo[2] + size[2] {
            for y in lo[1]..lo[1] + size[1] {
                for x in lo[0]..lo[0] + size[0] {
                    if self.grid.get(x, y, z) != EMPTY {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn fill_box(&mut self, lo: [usize; 3], size: [usize; 3], label: u16) {
        for z in lo[2]..lo[2] + size[2] {
            for y in lo[1]..lo[1] + size[1] {
                for x in lo[0]..lo[0] + size[0] {
                    self.grid.set(x, y, z, label);
                }
            }
        }
    }

    fn ground_is(&self, x: usize, y: usize, w: usize, h: usize, label: u16) -> bool {
        (y..y + h).all(|yy| (x..x + w).all(|xx| self.grid.get(xx, yy, 0) == label))
    }
}

/// Places randomly drawn boxes until the class reaches its target voxel
/// count, never overshooting it by more than 20%.
fn scatter(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    label: u16,
    target: f64,
    mut draw: impl FnMut(&Canvas, &mut ChaCha8Rng) -> Option<([usize; 3], [usize; 3])>,
) {
    let mut count = 0usize;
    for _ in 0..ATTEMPTS {
        if count as f64 >= target {
            break;
        }
        let Some((lo, size)) = draw(canvas, rng) else { continue };
        let n = size.iter().product::<usize>();
        if (count + n) as f64 > 1.2 * target || !canvas.free_box(lo, size) {
            continue;
        }
        canvas.fill_box(lo, size, label);
        count += n;
    }
}

pub fn generate_toy_scene(spec: &ToySceneSpec) -> Result<VoxelGrid, VoxelError> {
    let [dx, dy, dz] = spec.dims;
    if dx < MIN_DIMS[0] || dy < MIN_DIMS[1] || dz < MIN_DIMS[2] {
        return Err(VoxelError::ToySpec(format!("dims {:?} below minimum {MIN_DIMS:?} for the road", spec.dims)));
    }
    if (spec.num_classes as usize) < TOY_CLASS_NAMES.len() {
        return Err(VoxelError::ToySpec(format!("toy scenes need {} classes", TOY_CLASS_NAMES.len())));
    }
    let d = &spec.densities;
    let all = [d.road, d.sidewalk, d.building, d.vehicle, d.pedestrian, d.vegetation, d.pole];
    if all.iter().any(|v| !(0.0..=1.0).contains(v)) || d.road <= 0.0 {
        return Err(VoxelError::ToySpec("densities must lie in [0, 1] and road must be positive".into()));
    }
    let total = (dx * dy * dz) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let along_x = rng.random_bool(0.5);
    let (len, cross) = if along_x { (dx, dy) } else { (dy, dx) };
    let mut canvas = Canvas { grid: VoxelGrid::empty(spec.dims, spec.num_classes)?, along_x };

    let road_w = ((d.road * total / len as f64).round() as usize).clamp(2, cross / 2);
    let walk_w = ((d.sidewalk * total / (2 * len) as f64).round() as usize).min((cross - road_w) / 4);
    let band = road_w + 2 * walk_w;
    let start = rng.random_range(cross / 4..=(cross - band) - cross / 4).min(cross - band);
    for a in 0..len {
        for c in start..start + band {
            let label = if c < start + walk_w || c >= start + walk_w + road_w { SIDEWALK } else { ROAD };
            let (x, y) = canvas.xy(a, c);
            canvas.grid.set(x, y, 0, label);
        }
    }
    let road = (start + walk_w, road_w);
    let walks = [(start, walk_w), (start + walk_w + road_w, walk_w)];

    let top = dz - 1;
    scatter(&mut canvas, &mut rng, BUILDING, d.building * total, |cv, rng| {
        let w = rng.random_range(4..=8usize.min(dx / 2));
        let h = rng.random_range(4..=8usize.min(dy / 2));
        let x = rng.random_range(0..=dx - w);
        let y = rng.random_range(0..=dy - h);
        let height = rng.random_range(3.min(top)..=top);
        cv.ground_is(x, y, w, h, EMPTY).then_some(([x, y, 0], [w, h, height]))
    });
    scatter(&mut canvas, &mut rng, VEGETATION, d.vegetation * total, |cv, rng| {
        let x = rng.random_range(0..dx - 1);
        let y = rng.random_range(0..dy - 1);
        let height = rng.random_range(2..=3usize.min(top));
        cv.ground_is(x, y, 2, 2, EMPTY).then_some(([x, y, 0], [2, 2, height]))
    });
    scatter(&mut canvas, &mut rng, VEHICLE, d.vehicle * total, |cv, rng| {
        let a = rng.random_range(0..=len - 4);
        let c = rng.random_range(road.0..=road.0 + road.1 - 2);
        let (x, y) = cv.xy(a, c);
        let size = if cv.along_x { [4, 2, 2] } else { [2, 4, 2] };
        Some(([x, y, 1], size))
    });
    if walk_w > 0 {
        scatter(&mut canvas, &mut rng, PEDESTRIAN, d.pedestrian * total, |cv, rng| {
            let (s, w) = walks[rng.random_range(0..2usize)];
            let (x, y) = cv.xy(rng.random_range(0..len), rng.random_range(s..s + w));
            Some(([x, y, 1], [1, 1, 2]))
        });
        scatter(&mut canvas, &mut rng, POLE, d.pole * total, |cv, rng| {
            let (s, w) = walks[rng.random_range(0..2usize)];
            let (x, y) = cv.xy(rng.random_range(0..len), rng.random_range(s..s + w));
            Some(([x, y, 1], [1, 1, 4.min(top)]))
        });
    }
    Ok(canvas.grid)
}

/// `n` scenes seeded `spec.seed, spec.seed + 1, …`.
pub fn generate_toy_set(spec: &ToySceneSpec, n: usize) -> Result<Vec<VoxelGrid>, VoxelError> {
    (0..n as u64).map(|i| generate_toy_scene(&spec.with_seed(spec.seed.wrapping_add(i)))).collect()
}

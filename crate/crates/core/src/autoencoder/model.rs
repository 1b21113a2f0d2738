use std::f64::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AeError;
use crate::layout::{layout_hw, roll_in, roll_out};
use crate::numerics::nn::{Conv, Linear};
use crate::numerics::{Checkpoint, Ctx, Element, GatherTaps, ParamStore, Tape, Tensor, Var};
use crate::voxel::VoxelGrid;

/// Shape hyperparameters of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeArch {
    pub num_classes: usize,
    pub c_z: usize,
    pub d: usize,
    pub d_z: usize,
    pub pe_bands: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub dec_layers: usize,
}

impl Default for AeArch {
    fn default() -> Self {
        Self { num_classes: 8, c_z: 16, d: 2, d_z: 1, pe_bands: 10, enc_width: 32, dec_width: 128, dec_layers: 4 }
    }
}

impl AeArch {
    pub fn mask_dims(&self, grid_dims: [usize; 3]) -> Result<[usize; 3], AeError> {
        let [x, y, z] = grid_dims;
        if x % self.d != 0 || y % self.d != 0 || z % self.d_z != 0 {
            return Err(AeError::IndivisibleDims { dims: grid_dims, d: self.d, d_z: self.d_z });
        }
        Ok([x / self.d, y / self.d, z / self.d_z])
    }

    fn validate(&self) -> Result<(), AeError> {
        let fields = [self.num_classes, self.c_z, self.d, self.d_z, self.enc_width, self.dec_width];
        if fields.contains(&0) || self.num_classes < 2 || self.dec_layers < 2 {
            return Err(AeError::Arch(format!("{self:?}")));
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor<f32> {
        let v = [
            self.num_classes,
            self.c_z,
            self.d,
            self.d_z,
            self.pe_bands,
            self.enc_width,
            self.dec_width,
            self.dec_layers,
        ];
        Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("meta shape")
    }

    fn from_meta(t: &Tensor<f32>) -> Result<Self, AeError> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        if v.len() != 8 {
            return Err(AeError::Arch(format!("meta tensor of length {}", v.len())));
        }
        let arch = Self {
            num_classes: v[0],
            c_z: v[1],
            d: v[2],
            d_z: v[3],
            pe_bands: v[4],
            enc_width: v[5],
            dec_width: v[6],
            dec_layers: v[7],
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Triplane latent: `xy` is `[C, X_m, Y_m]`, `xz` is `[C, X_m, Z_m]`, `yz` is
/// `[C, Y_m, Z_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    pub xy: Tensor<f32>,
    pub xz: Tensor<f32>,
    pub yz: Tensor<f32>,
}

impl Triplane {
    pub fn new(xy: Tensor<f32>, xz: Tensor<f32>, yz: Tensor<f32>) -> Result<Self, AeError> {
        let (a, b, c) = (xy.shape(), xz.shape(), yz.shape());
        let ok = a.len() == 3 && b.len() == 3 && c.len() == 3 && a[0] == b[0] && a[0] == c[0] && a[1] == b[1] && a[2] == c[1] && b[2] == c[2];
        if !ok {
            return Err(AeError::Shape(format!("inconsistent triplane planes {a:?} {b:?} {c:?}")));
        }
        Ok(Self { xy, xz, yz })
    }

    /// Every plane filled with `value`.
    pub fn constant(channels: usize, mask_dims: [usize; 3], value: f32) -> Self {
        let [x, y, z] = mask_dims;
        Self {
            xy: Tensor::full(&[channels, x, y], value),
            xz: Tensor::full(&[channels, x, z], value),
            yz: Tensor::full(&[channels, y, z], value),
        }
    }

    pub fn channels(&self) -> usize {
        self.xy.shape()[0]
    }

    pub fn mask_dims(&self) -> [usize; 3] {
        [self.xy.shape()[1], self.xy.shape()[2], self.xz.shape()[2]]
    }

    /// The `[C, X_m+Z_m, Y_m+Z_m]` rolled-out image.
    pub fn to_layout(&self) -> Tensor<f32> {
        let dims = self.mask_dims();
        let (h, w) = layout_hw(dims);
        let data = roll_out(self.xy.data(), self.xz.data(), self.yz.data(), self.channels(), dims);
        Tensor::new(&[self.channels(), h, w], data).expect("layout shape")
    }

    pub fn from_layout(img: &Tensor<f32>, mask_dims: [usize; 3]) -> Result<Self, AeError> {
        let (h, w) = layout_hw(mask_dims);
        let s = img.shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(AeError::Shape(format!("layout {s:?} does not match mask dims {mask_dims:?}")));
        }
        let c = s[0];
        let [x, y, z] = mask_dims;
        let (xy, xz, yz) = roll_in(img.data(), c, mask_dims);
        Self::new(Tensor::new(&[c, x, y], xy)?, Tensor::new(&[c, x, z], xz)?, Tensor::new(&[c, y, z], yz)?)
    }
}

/// Per-channel latent statistics used to standardize triplanes for diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    /// Statistics over every plane cell of every triplane.
    pub fn compute(planes: &[Triplane]) -> Self {
        let c = planes[0].channels();
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut n = 0usize;
        for tp in planes {
            for t in [&tp.xy, &tp.xz, &tp.yz] {
                let s = t.numel() / c;
                for ch in 0..c {
                    for &v in &t.data()[ch * s..(ch + 1) * s] {
                        sum[ch] += v as f64;
                        sq[ch] += (v as f64) * (v as f64);
                    }
                }
                n += s;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
        Self { mean: mean.iter().map(|&m| m as f32).collect(), std }
    }

    fn apply(&self, tp: &Triplane, f: impl Fn(f32, f32, f32) -> f32) -> Triplane {
        let map = |t: &Tensor<f32>| {
            let c = t.shape()[0];
            let s = t.numel() / c;
            let data = t.data().iter().enumerate().map(|(i, &v)| f(v, self.mean[i / s], self.std[i / s])).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        debug_assert_eq!(tp.channels(), self.mean.len());
        Triplane { xy: map(&tp.xy), xz: map(&tp.xz), yz: map(&tp.yz) }
    }

    pub fn standardize(&self, tp: &Triplane) -> Triplane {
        self.apply(tp, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, tp: &Triplane) -> Triplane {
        self.apply(tp, |v, m, s| v * s + m)
    }
}

/// Sinusoidal embedding of coordinates normalized by `dims`: per axis, `L`
/// sines then `L` cosines of `2^k π u`.
pub fn positional_embedding(coords: &[[f64; 3]], dims: [usize; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * 6 * bands);
    for p in coords {
        for a in 0..3 {
            let u = p[a] / dims[a] as f64;
            for k in 0..bands {
                out.push(((1u64 << k) as f64 * PI * u).sin());
            }
            for k in 0..bands {
                out.push(((1u64 << k) as f64 * PI * u).cos());
            }
        }
    }
    out
}

/// Bilinear corner weights along one plane axis of length `n` at continuous
/// cell coordinate `u` (cell centers at integers).
fn corners(u: f64, n: usize) -> [(usize, f64); 2] {
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let f = u - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Gather taps reading the three planes at each point: 4 bilinear taps per
/// plane, sources ordered xy, xz, yz.
pub fn triplane_taps<T: Element>(
    coords: &[[f64; 3]],
    grid_dims: [usize; 3],
    mask_dims: [usize; 3],
) -> Result<GatherTaps<T>, AeError> {
    let scale = [
        grid_dims[0] as f64 / mask_dims[0] as f64,
        grid_dims[1] as f64 / mask_dims[1] as f64,
        grid_dims[2] as f64 / mask_dims[2] as f64,
    ];
    let mut taps = Vec::with_capacity(coords.len());
    for p in coords {
        if (0..3).any(|a| !(p[a] >= 0.0 && p[a] < grid_dims[a] as f64)) {
            return Err(AeError::OutOfBounds { coord: *p, dims: grid_dims });
        }
        let u = [p[0] / scale[0] - 0.5, p[1] / scale[1] - 0.5, p[2] / scale[2] - 0.5];
        let mut row = Vec::with_capacity(12);
        for (src, (a, b)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
            let cols = mask_dims[b];
            for (ia, wa) in corners(u[a], mask_dims[a]) {
                for (ib, wb) in corners(u[b], cols) {
                    let w = wa * wb;
                    if w != 0.0 {
                        row.push((src, ia * cols + ib, T::from_f64_lossy(w)));
                    }
                }
            }
        }
        taps.push(row);
    }
    Ok(GatherTaps { points: coords.len(), taps })
}

/// Continuous centers of every voxel, in grid index order.
pub fn voxel_centers(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let [x, y, z] = dims;
    let mut out = Vec::with_capacity(x * y * z);
    for k in 0..z {
        for j in 0..y {
            for i in 0..x {
                out.push([i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5]);
            }
        }
    }
    out
}

/// One-hot `[N, X, Y, Z]` encoding of a grid.
pub fn one_hot<T: Element>(grid: &VoxelGrid, num_classes: usize) -> Tensor<T> {
    let [x, y, z] = grid.dims();
    let mut data = vec![T::zero(); num_classes * x * y * z];
    for (i, &l) in grid.labels().iter().enumerate() {
        let [a, b, c] = grid.coords(i);
        data[((l as usize * x + a) * y + b) * z + c] = T::one();
    }
    Tensor::new(&[num_classes, x, y, z], data).expect("one-hot shape")
}

/// 3D-conv encoder to a triplane, point decoder back to class logits.
#[derive(Clone, Debug)]
pub struct TriplaneAutoencoder<T: Element> {
    arch: AeArch,
    params: ParamStore<T>,
    enc: [Conv; 3],
    dec: Vec<Linear>,
    stats: Option<LatentStats>,
}

impl<T: Element> TriplaneAutoencoder<T> {
    pub fn new(arch: AeArch, seed: u64) -> Result<Self, AeError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (n, w, c) = (arch.num_classes, arch.enc_width, arch.c_z);
        let stride = [arch.d, arch.d, arch.d_z];
        let kernel = stride.map(|s| if s > 1 { 2 * s - 1 } else { 3 });
        let enc = [
            Conv::new3d(&mut params, &mut rng, "ae.enc.conv1", n, w, [3, 3, 3], [1, 1, 1]),
            Conv::new3d(&mut params, &mut rng, "ae.enc.conv2", w, w, kernel, stride),
            Conv::new3d(&mut params, &mut rng, "ae.enc.conv3", w, c, [1, 1, 1], [1, 1, 1]),
        ];
        let mut dec = Vec::with_capacity(arch.dec_layers);
        let mut inp = c + 6 * arch.pe_bands;
        for i in 0..arch.dec_layers {
            let out = if i + 1 == arch.dec_layers { n } else { arch.dec_width };
            dec.push(Linear::new(&mut params, &mut rng, &format!("ae.dec.fc{i}"), inp, out));
            inp = out;
        }
        Ok(Self { arch, params, enc, dec, stats: None })
    }

    pub fn arch(&self) -> AeArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn stats(&self) -> Option<&LatentStats> {
        self.stats.as_ref()
    }

    pub fn set_stats(&mut self, stats: Option<LatentStats>) {
        self.stats = stats;
    }

    /// Encoder on the tape: returns the xy, xz, yz planes.
    pub fn encode_vars<'a>(&self, cx: Ctx<'a, T>, grid: &VoxelGrid) -> Result<[Var<'a, T>; 3], AeError> {
        self.check_grid(grid)?;
        let x = cx.constant(one_hot(grid, self.arch.num_classes));
        let h = self.enc[0].forward(cx, x)?.gelu();
        let h = self.enc[1].forward(cx, h)?.gelu();
        let z = self.enc[2].forward(cx, h)?;
        Ok([z.axis_mean(3)?, z.axis_mean(2)?, z.axis_mean(1)?])
    }

    /// Summed bilinear plane features `[P, C]` at `coords`.
    pub fn query_vars<'a>(
        &self,
        planes: [Var<'a, T>; 3],
        coords: &[[f64; 3]],
        grid_dims: [usize; 3],
    ) -> Result<Var<'a, T>, AeError> {
        let xy = planes[0].shape();
        let xz = planes[1].shape();
        let mask_dims = [xy[1], xy[2], xz[2]];
        let taps = triplane_taps(coords, grid_dims, mask_dims)?;
        Ok(planes[0].tape().gather(&planes, Rc::new(taps))?)
    }

    /// Decoder on the tape: features `[P, C]` plus positional embedding → `[P, N]` logits.
    pub fn decode_vars<'a>(
        &self,
        cx: Ctx<'a, T>,
        features: Var<'a, T>,
        coords: &[[f64; 3]],
        grid_dims: [usize; 3],
    ) -> Result<Var<'a, T>, AeError> {
        let mut h = features;
        if self.arch.pe_bands > 0 {
            let pe = positional_embedding(coords, grid_dims, self.arch.pe_bands);
            let pe = Tensor::new(&[coords.len(), 6 * self.arch.pe_bands], pe.into_iter().map(T::from_f64_lossy).collect())?;
            h = cx.tape.concat(&[features, cx.constant(pe)], 1)?;
        }
        let last = self.dec.len() - 1;
        for (i, layer) in self.dec.iter().enumerate() {
            h = layer.forward(cx, h)?;
            if i < last {
                h = h.gelu();
            }
        }
        Ok(h)
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<(), AeError> {
        if grid.num_classes() as usize != self.arch.num_classes {
            return Err(AeError::Shape(format!(
                "grid has {} classes, model {}",
                grid.num_classes(),
                self.arch.num_classes
            )));
        }
        self.arch.mask_dims(grid.dims())?;
        Ok(())
    }

    fn planes_of<'a>(&self, tape: &'a Tape<T>, tp: &Triplane) -> [Var<'a, T>; 3] {
        [tp.xy.cast(), tp.xz.cast(), tp.yz.cast()].map(|t| tape.constant(t))
    }

    pub fn encode(&self, grid: &VoxelGrid) -> Result<Triplane, AeError> {
        let tape = Tape::new();
        let [xy, xz, yz] = self.encode_vars(Ctx::new(&tape, &self.params), grid)?;
        Triplane::new(xy.value().cast(), xz.value().cast(), yz.value().cast())
    }

    /// Plane features summed per point, `[P, C]`.
    pub fn query_triplane(&self, tp: &Triplane, coords: &[[f64; 3]], grid_dims: [usize; 3]) -> Result<Tensor<T>, AeError> {
        let tape = Tape::new();
        let f = self.query_vars(self.planes_of(&tape, tp), coords, grid_dims)?;
        Ok((*f.value()).clone())
    }

    /// Class logits `[P, N]` at `coords`.
    pub fn decode_points(&self, tp: &Triplane, coords: &[[f64; 3]], grid_dims: [usize; 3]) -> Result<Tensor<T>, AeError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.params);
        let f = self.query_vars(self.planes_of(&tape, tp), coords, grid_dims)?;
        Ok((*self.decode_vars(cx, f, coords, grid_dims)?.value()).clone())
    }

    /// Argmax decode at every voxel center; ties go to the lower class id.
    pub fn reconstruct(&self, tp: &Triplane, grid_dims: [usize; 3]) -> Result<VoxelGrid, AeError> {
        let expected = self.arch.mask_dims(grid_dims)?;
        if tp.mask_dims() != expected {
            return Err(AeError::Shape(format!("triplane {:?} vs grid mask dims {expected:?}", tp.mask_dims())));
        }
        let logits = self.decode_points(tp, &voxel_centers(grid_dims), grid_dims)?;
        let labels = argmax_rows(logits.data(), self.arch.num_classes);
        Ok(VoxelGrid::new(grid_dims, self.arch.num_classes as u16, labels)?)
    }

    /// Reconstruction of `grid` through its own triplane.
    pub fn roundtrip(&self, grid: &VoxelGrid) -> Result<VoxelGrid, AeError> {
        self.reconstruct(&self.encode(grid)?, grid.dims())
    }

    /// Triplane as the diffusion model sees it: standardized when stats exist.
    pub fn encode_latent(&self, grid: &VoxelGrid) -> Result<Triplane, AeError> {
        let tp = self.encode(grid)?;
        Ok(match &self.stats {
            Some(s) => s.standardize(&tp),
            None => tp,
        })
    }

    /// Inverse of [`encode_latent`](Self::encode_latent) followed by reconstruction.
    pub fn decode_latent(&self, latent: &Triplane, grid_dims: [usize; 3]) -> Result<VoxelGrid, AeError> {
        let tp = match &self.stats {
            Some(s) => s.destandardize(latent),
            None => latent.clone(),
        };
        self.reconstruct(&tp, grid_dims)
    }
}

pub(crate) fn argmax_rows<T: Element>(data: &[T], n: usize) -> Vec<u16> {
    data.chunks(n)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

const META: &str = "ae.meta.config";
const STATS_MEAN: &str = "ae.stats.mean";
const STATS_STD: &str = "ae.stats.std";

impl TriplaneAutoencoder<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.push(META, self.arch.to_meta());
        if let Some(s) = &self.stats {
            ck.push(STATS_MEAN, Tensor::new(&[s.mean.len()], s.mean.clone()).expect("stats"));
            ck.push(STATS_STD, Tensor::new(&[s.std.len()], s.std.clone()).expect("stats"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AeError> {
        let arch = AeArch::from_meta(ck.require(META)?)?;
        let mut model = Self::new(arch, 0)?;
        model.params.load_from(ck.iter())?;
        if let (Some(m), Some(s)) = (ck.get(STATS_MEAN), ck.get(STATS_STD)) {
            if m.numel() != arch.c_z || s.numel() != arch.c_z {
                return Err(AeError::Shape(format!("latent stats of length {} for C_z={}", m.numel(), arch.c_z)));
            }
            model.stats = Some(LatentStats { mean: m.data().to_vec(), std: s.data().to_vec() });
        }
        Ok(model)
    }
}

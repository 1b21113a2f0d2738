//! Latent diffusion over rolled-out triplanes, conditioned on trimasks.

mod sampler;
mod schedule;
mod train;
mod unet;

pub use sampler::{
    ddpm_sample, guided_x0, repaint_sample, repaint_schedule, Observer, SamplerConfig, Strategy, X0Predictor,
};
pub use schedule::NoiseSchedule;
pub use train::{
    train_diffusion, training_loss, training_step, write_diffusion_csv, DiffusionTrainConfig, LatentExample, StepDraw,
    StepLog, TrainedDiffusion,
};
pub use unet::{timestep_embedding, Condition, Denoiser, DenoiserConfig};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::autoencoder::{AeError, LatentStats, Triplane, TriplaneAutoencoder};
use crate::config::ConfigError;
use crate::gsfm::{Ablation, GsfmError};
use crate::layout::layout_hw;
use crate::numerics::{Checkpoint, NumericsError, Tensor};
use crate::trimask::{SceneMaskSet, TrimaskError};
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Gsfm(#[from] GsfmError),
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error(transparent)]
    Trimask(#[from] TrimaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the conditional path pools semantic tokens from while sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenSource {
    /// The previous step's x̂0.
    #[default]
    Estimate,
    /// A zero triplane, i.e. no semantic tokens.
    Zero,
}

/// A trained denoiser with its schedule and training metadata.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub p_drop: f64,
    pub stats: Option<LatentStats>,
}

const META: &str = "diffusion.meta.config";
const STATS_MEAN: &str = "diffusion.stats.mean";
const STATS_STD: &str = "diffusion.stats.std";

impl DiffusionModel {
    pub fn new(
        denoiser: Denoiser<f32>,
        schedule: NoiseSchedule,
        p_drop: f64,
        stats: Option<LatentStats>,
    ) -> Result<Self, DiffusionError> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(DiffusionError::Config(format!("p_drop {p_drop} outside [0, 1)")));
        }
        Ok(Self { denoiser, schedule, p_drop, stats })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.denoiser.config()
    }

    /// `[C_z, H, W]` of the latent layout.
    pub fn latent_shape(&self) -> [usize; 3] {
        let c = self.config();
        let (h, w) = layout_hw(c.mask_dims);
        [c.c_z, h, w]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = self.config();
        let (b0, b1) = self.schedule.endpoints();
        let mut meta = vec![self.schedule.steps() as f64, b0, b1, self.p_drop];
        meta.extend(c.flags.to_bits().map(|b| b as u8 as f64));
        meta.extend([c.num_classes, c.c_z, c.mask_dims[0], c.mask_dims[1], c.mask_dims[2]].map(|v| v as f64));
        meta.extend([c.base, c.blocks, c.attn_levels, c.temb, c.c_emb, c.geo_hidden, c.sem_hidden].map(|v| v as f64));
        meta.push(c.mults.len() as f64);
        meta.extend(c.mults.iter().map(|&m| m as f64));
        let mut ck = Checkpoint::from_params(self.denoiser.params());
        ck.push(META, Tensor::new(&[meta.len()], meta.into_iter().map(|v| v as f32).collect()).expect("meta"));
        if let Some(s) = &self.stats {
            ck.push(STATS_MEAN, Tensor::new(&[s.mean.len()], s.mean.clone()).expect("stats"));
            ck.push(STATS_STD, Tensor::new(&[s.std.len()], s.std.clone()).expect("stats"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        let m: Vec<f64> = ck.require(META)?.data().iter().map(|&v| v as f64).collect();
        let bad = || DiffusionError::Numerics(NumericsError::Malformed(format!("{META} has {} entries", m.len())));
        if m.len() < 21 {
            return Err(bad());
        }
        let u = |i: usize| m[i].round() as usize;
        let levels = u(20);
        if m.len() != 21 + levels {
            return Err(bad());
        }
        let flags = Ablation::from_bits([m[4] != 0.0, m[5] != 0.0, m[6] != 0.0, m[7] != 0.0]);
        let cfg = DenoiserConfig {
            num_classes: u(8),
            c_z: u(9),
            mask_dims: [u(10), u(11), u(12)],
            base: u(13),
            blocks: u(14),
            attn_levels: u(15),
            temb: u(16),
            c_emb: u(17),
            geo_hidden: u(18),
            sem_hidden: u(19),
            mults: (0..levels).map(|i| u(21 + i)).collect(),
            flags,
        };
        let schedule = NoiseSchedule::linear(u(0), m[1], m[2])?;
        let mut denoiser = Denoiser::new(cfg, 0)?;
        denoiser.params_mut().load_from(ck.iter())?;
        let stats = match (ck.get(STATS_MEAN), ck.get(STATS_STD)) {
            (Some(a), Some(b)) => Some(LatentStats { mean: a.data().to_vec(), std: b.data().to_vec() }),
            _ => None,
        };
        Self::new(denoiser, schedule, m[3], stats)
    }

    /// Checks that `ae` decodes this model's latents.
    pub fn check_autoencoder(&self, ae: &TriplaneAutoencoder<f32>) -> Result<[usize; 3], DiffusionError> {
        let c = self.config();
        let arch = ae.arch();
        if arch.c_z != c.c_z || arch.num_classes != c.num_classes {
            return Err(DiffusionError::Incompatible(format!(
                "autoencoder C_z={} N={}, diffusion C_z={} N={}",
                arch.c_z, arch.num_classes, c.c_z, c.num_classes
            )));
        }
        let grid = [c.mask_dims[0] * arch.d, c.mask_dims[1] * arch.d, c.mask_dims[2] * arch.d_z];
        if self.stats.as_ref() != ae.stats() {
            return Err(DiffusionError::Incompatible("latent standardization differs between checkpoints".into()));
        }
        Ok(grid)
    }
}

/// The trained denoiser bound to one mask set.
pub struct ConditionedDenoiser<'m> {
    pub denoiser: &'m Denoiser<f32>,
    pub set: &'m SceneMaskSet,
    pub tokens: TokenSource,
}

impl X0Predictor for ConditionedDenoiser<'_> {
    fn predict_x0(
        &self,
        x_t: &Tensor<f32>,
        t: usize,
        conditional: bool,
        estimate: &Tensor<f32>,
    ) -> Result<Tensor<f32>, DiffusionError> {
        if !conditional {
            return self.denoiser.predict(x_t, t, None);
        }
        let dims = self.denoiser.config().mask_dims;
        let tp = match self.tokens {
            TokenSource::Estimate => Triplane::from_layout(estimate, dims)?,
            TokenSource::Zero => Triplane::constant(self.denoiser.config().c_z, dims, 0.0),
        };
        self.denoiser.predict(x_t, t, Some((self.set, [&tp.xy, &tp.xz, &tp.yz])))
    }
}

/// Samples a latent for `set` with the configured strategy (no known region
/// for repaint).
pub fn sample_latent(
    model: &DiffusionModel,
    set: &SceneMaskSet,
    sampler: &SamplerConfig,
    tokens: TokenSource,
    observer: Option<Observer<'_>>,
) -> Result<Tensor<f32>, DiffusionError> {
    let c = model.config();
    if set.dims() != c.mask_dims || set.num_classes() as usize != c.num_classes {
        return Err(DiffusionError::Incompatible(format!(
            "mask set {} classes {:?}, model {} classes {:?}",
            set.num_classes(),
            set.dims(),
            c.num_classes,
            c.mask_dims
        )));
    }
    let pred = ConditionedDenoiser { denoiser: &model.denoiser, set, tokens };
    let shape = model.latent_shape();
    match sampler.strategy {
        Strategy::Ddpm => ddpm_sample(&pred, &shape, &model.schedule, sampler, observer),
        Strategy::Repaint => {
            let known = Tensor::zeros(&shape);
            repaint_sample(&pred, &known, &vec![false; shape[1] * shape[2]], &model.schedule, sampler, observer)
        }
    }
}

/// Mask set → latent → voxel scene.
pub fn generate_scene(
    set: &SceneMaskSet,
    model: &DiffusionModel,
    ae: &TriplaneAutoencoder<f32>,
    sampler: &SamplerConfig,
    observer: Option<Observer<'_>>,
) -> Result<VoxelGrid, DiffusionError> {
    let grid = model.check_autoencoder(ae)?;
    let latent = sample_latent(model, set, sampler, TokenSource::Estimate, observer)?;
    let tp = Triplane::from_layout(&latent, set.dims())?;
    Ok(ae.decode_latent(&tp, grid)?)
}

/// Mean wall time of one sampling run per (strategy, steps).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub steps: usize,
    pub wall_seconds: f64,
}

pub fn bench_sampling(
    model: &DiffusionModel,
    set: &SceneMaskSet,
    base: &SamplerConfig,
    strategies: &[Strategy],
    steps: &[usize],
    runs: usize,
) -> Result<Vec<BenchRow>, DiffusionError> {
    let mut rows = Vec::new();
    for &s in steps {
        for &strategy in strategies {
            let cfg = SamplerConfig { strategy, steps: s, ..*base };
            let start = Instant::now();
            for r in 0..runs.max(1) {
                sample_latent(model, set, &SamplerConfig { seed: cfg.seed + r as u64, ..cfg }, TokenSource::Estimate, None)?;
            }
            rows.push(BenchRow { strategy, steps: s, wall_seconds: start.elapsed().as_secs_f64() / runs.max(1) as f64 });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<(), DiffusionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "strategy,steps,wall_seconds")?;
    for r in rows {
        let name = match r.strategy {
            Strategy::Ddpm => "ddpm",
            Strategy::Repaint => "repaint",
        };
        writeln!(f, "{name},{},{:.6}", r.steps, r.wall_seconds)?;
    }
    f.flush()?;
    Ok(())
}

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::unet::{Condition, Denoiser, DenoiserConfig};
use super::{DiffusionError, DiffusionModel, NoiseSchedule};
use crate::autoencoder::{Triplane, TriplaneAutoencoder};
use crate::config::KeyValues;
use crate::gsfm::Ablation;
use crate::numerics::{Adam, AdamConfig, Ctx, Element, Gradients, StepOutcome, Tape, Tensor};
use crate::trimask::{decompose_scene, SceneMaskSet};
use crate::voxel::VoxelGrid;

/// A standardized clean latent with the trimasks of its scene.
#[derive(Clone, Debug)]
pub struct LatentExample {
    pub latent: Triplane,
    pub set: SceneMaskSet,
}

impl LatentExample {
    pub fn from_scene(ae: &TriplaneAutoencoder<f32>, grid: &VoxelGrid) -> Result<Self, DiffusionError> {
        let arch = ae.arch();
        Ok(Self { latent: ae.encode_latent(grid)?, set: decompose_scene(grid, arch.d, arch.d_z)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub base: usize,
    pub mults: Vec<usize>,
    pub blocks: usize,
    pub attn_levels: usize,
    pub flags: Ablation,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub p_drop: f64,
    pub lr: f64,
    /// Optimizer steps, one example each.
    pub iterations: usize,
    pub seed: u64,
    pub time_limit_secs: Option<f64>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            base: 64,
            mults: vec![1, 2, 4],
            blocks: 2,
            attn_levels: 2,
            flags: Ablation::default(),
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            p_drop: 0.1,
            lr: 1e-4,
            iterations: 2000,
            seed: 0,
            time_limit_secs: None,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, DiffusionError> {
        let d = Self::default();
        let mults: String = kv.get_or("mults", "1,2,4".to_string())?;
        let mults = mults
            .split(',')
            .map(|m| m.trim().parse::<usize>().map_err(|_| DiffusionError::Config(format!("bad mults entry {m:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let limit: f64 = kv.get_or("time_limit_secs", 0.0)?;
        let cfg = Self {
            base: kv.get_or("base", d.base)?,
            mults,
            blocks: kv.get_or("blocks", d.blocks)?,
            attn_levels: kv.get_or("attn_levels", d.attn_levels)?,
            flags: Ablation {
                use_geometric_branch: kv.get_or("use_geometric_branch", true)?,
                use_semantic_branch: kv.get_or("use_semantic_branch", true)?,
                use_semantic_tokens: kv.get_or("use_semantic_tokens", true)?,
                use_mask_concat: kv.get_or("use_mask_concat", true)?,
            },
            timesteps: kv.get_or("timesteps", d.timesteps)?,
            beta_start: kv.get_or("beta_start", d.beta_start)?,
            beta_end: kv.get_or("beta_end", d.beta_end)?,
            p_drop: kv.get_or("p_drop", d.p_drop)?,
            lr: kv.get_or("lr", d.lr)?,
            iterations: kv.get_or("iterations", d.iterations)?,
            seed: kv.get_or("seed", d.seed)?,
            time_limit_secs: (limit > 0.0).then_some(limit),
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn denoiser(&self, num_classes: usize, c_z: usize, mask_dims: [usize; 3]) -> DenoiserConfig {
        DenoiserConfig {
            base: self.base,
            mults: self.mults.clone(),
            blocks: self.blocks,
            attn_levels: self.attn_levels,
            flags: self.flags,
            ..DenoiserConfig::new(num_classes, c_z, mask_dims)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub dropped: bool,
    pub loss: f64,
    pub seconds: f64,
}

pub fn write_diffusion_csv(curve: &[StepLog], path: impl AsRef<Path>) -> Result<(), DiffusionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,t,dropped,loss")?;
    for s in curve {
        writeln!(f, "{},{},{},{}", s.step, s.t, s.dropped as u8, s.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// The noise and conditioning draws of one training step.
#[derive(Clone, Debug)]
pub struct StepDraw<T> {
    pub t: usize,
    pub noise: Tensor<T>,
    pub dropped: bool,
}

impl<T: Element> StepDraw<T> {
    pub fn sample<R: Rng>(shape: &[usize], steps: usize, p_drop: f64, rng: &mut R) -> Self {
        let t = rng.random_range(1..=steps);
        let noise = Tensor::randn(shape, 1.0, rng);
        let dropped = rng.random::<f64>() < p_drop;
        Self { t, noise, dropped }
    }
}

/// `MSE(T0, D(q_sample(T0, t, noise), t, cond))` for one example.
pub fn training_loss<'a, T: Element>(
    model: &Denoiser<T>,
    cx: Ctx<'a, T>,
    sched: &NoiseSchedule,
    x0: &Tensor<T>,
    planes: [&Tensor<T>; 3],
    set: &SceneMaskSet,
    draw: &StepDraw<T>,
) -> Result<crate::numerics::Var<'a, T>, DiffusionError> {
    let x_t = sched.q_sample(x0, draw.t, &draw.noise)?;
    let cond = (!draw.dropped).then(|| Condition { set, planes: planes.map(|p| cx.constant(p.clone())) });
    let pred = model.forward_vars(cx, cx.constant(x_t), draw.t, cond)?;
    Ok(pred.mse(cx.constant(x0.clone()))?)
}

/// One draw plus loss and gradients.
pub fn training_step<R: Rng>(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    example: &LatentExample,
    p_drop: f64,
    rng: &mut R,
) -> Result<(f64, StepDraw<f32>, Gradients<f32>), DiffusionError> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(DiffusionError::Config(format!("p_drop {p_drop} outside [0, 1)")));
    }
    let x0 = example.latent.to_layout();
    let draw = StepDraw::sample(x0.shape(), sched.steps(), p_drop, rng);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, model.params());
    let tp = &example.latent;
    let loss = training_loss(model, cx, sched, &x0, [&tp.xy, &tp.xz, &tp.yz], &example.set, &draw)?;
    let value = loss.value().data()[0] as f64;
    Ok((value, draw, tape.backward(loss)?))
}

pub struct TrainedDiffusion {
    pub model: DiffusionModel,
    pub curve: Vec<StepLog>,
}

pub fn train_diffusion(
    examples: &[LatentExample],
    latent_stats: Option<crate::autoencoder::LatentStats>,
    cfg: &DiffusionTrainConfig,
    mut progress: impl FnMut(&StepLog),
) -> Result<TrainedDiffusion, DiffusionError> {
    let first = examples.first().ok_or(DiffusionError::EmptyDataset)?;
    let c_z = first.latent.channels();
    let mask_dims = first.set.dims();
    let n = first.set.num_classes() as usize;
    for e in examples {
        if e.latent.mask_dims() != mask_dims || e.set.dims() != mask_dims || e.latent.channels() != c_z || e.set.num_classes() as usize != n {
            return Err(DiffusionError::Shape("all examples must share latent shape, mask dims and class count".into()));
        }
    }
    let sched = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let denoiser = Denoiser::<f32>::new(cfg.denoiser(n, c_z, mask_dims), cfg.seed)?;
    let mut model = DiffusionModel::new(denoiser, sched, cfg.p_drop, latent_stats)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.denoiser.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xd1ff));
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let ex = &examples[rng.random_range(0..examples.len())];
        let (loss, draw, grads) = training_step(&model.denoiser, &model.schedule, ex, cfg.p_drop, &mut rng)?;
        if !loss.is_finite() {
            return Err(DiffusionError::Diverged { step, detail: format!("loss {loss}") });
        }
        let grads: Vec<_> = (0..model.denoiser.params().len()).map(|i| grads.param(i).cloned()).collect();
        if let StepOutcome::SkippedNonFinite { param } = adam.step(model.denoiser.params_mut(), &grads) {
            return Err(DiffusionError::Diverged { step, detail: format!("non-finite gradient for {param}") });
        }
        let log = StepLog { step, t: draw.t, dropped: draw.dropped, loss, seconds: start.elapsed().as_secs_f64() };
        progress(&log);
        curve.push(log);
        if cfg.time_limit_secs.is_some_and(|l| log.seconds >= l) {
            break;
        }
    }
    Ok(TrainedDiffusion { model, curve })
}

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{voxel_centers, AeArch, LatentStats, TriplaneAutoencoder};
use super::AeError;
use crate::config::KeyValues;
use crate::numerics::{Adam, AdamConfig, Ctx, Element, GradAccumulator, StepOutcome, Tape, Var};
use crate::voxel::{VoxelGrid, EMPTY};

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub arch: AeArch,
    pub alpha: f64,
    pub points: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub standardize: bool,
    /// Stop after the epoch that crosses this wall-clock budget.
    pub time_limit_secs: Option<f64>,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            arch: AeArch::default(),
            alpha: 1.0,
            points: 4096,
            lr: 1e-3,
            batch: 4,
            epochs: 100,
            seed: 0,
            standardize: true,
            time_limit_secs: None,
        }
    }
}

impl AeTrainConfig {
    /// Reads the keys of a `key = value` file over the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, AeError> {
        let d = Self::default();
        let a = d.arch;
        let limit: f64 = kv.get_or("time_limit_secs", 0.0)?;
        let cfg = Self {
            arch: AeArch {
                num_classes: kv.get_or("num_classes", a.num_classes)?,
                c_z: kv.get_or("c_z", a.c_z)?,
                d: kv.get_or("d", a.d)?,
                d_z: kv.get_or("d_z", a.d_z)?,
                pe_bands: kv.get_or("pe_bands", a.pe_bands)?,
                enc_width: kv.get_or("enc_width", a.enc_width)?,
                dec_width: kv.get_or("dec_width", a.dec_width)?,
                dec_layers: kv.get_or("dec_layers", a.dec_layers)?,
            },
            alpha: kv.get_or("alpha", d.alpha)?,
            points: kv.get_or("points", d.points)?,
            lr: kv.get_or("lr", d.lr)?,
            batch: kv.get_or("batch", d.batch)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            standardize: kv.get_or("standardize", d.standardize)?,
            time_limit_secs: (limit > 0.0).then_some(limit),
        };
        kv.finish()?;
        if cfg.alpha < 0.0 || cfg.batch == 0 || cfg.points == 0 {
            return Err(AeError::Arch("alpha must be ≥ 0, batch and points positive".into()));
        }
        Ok(cfg)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub lovasz: f64,
    pub total: f64,
    pub seconds: f64,
}

pub fn write_loss_csv(curve: &[EpochLog], path: impl AsRef<Path>) -> Result<(), AeError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,ce,lovasz,total")?;
    for e in curve {
        writeln!(f, "{},{},{},{}", e.epoch, e.ce, e.lovasz, e.total)?;
    }
    f.flush()?;
    Ok(())
}

/// `CE(point_logits, point_labels) + α · Lovász(softmax(grid_logits), grid_labels)`,
/// returned with its two parts.
pub fn ae_loss<'a, T: Element>(
    point_logits: Var<'a, T>,
    point_labels: &[usize],
    grid_logits: Option<Var<'a, T>>,
    grid_labels: &[usize],
    alpha: f64,
) -> Result<(Var<'a, T>, Var<'a, T>, Option<Var<'a, T>>), AeError> {
    if alpha < 0.0 {
        return Err(AeError::Arch(format!("alpha {alpha} < 0")));
    }
    let ce = point_logits.cross_entropy(point_labels)?;
    match grid_logits {
        Some(g) if alpha > 0.0 => {
            let lov = g.softmax().lovasz_softmax(grid_labels)?;
            Ok((ce.add(lov.scale(alpha))?, ce, Some(lov)))
        }
        _ => Ok((ce, ce, None)),
    }
}

/// `P` voxel indices, half drawn from occupied voxels and half from empty
/// ones (all from whichever side is non-empty if the other is).
pub fn sample_points<R: Rng>(grid: &VoxelGrid, p: usize, rng: &mut R) -> Vec<usize> {
    let (mut occ, mut free) = (Vec::new(), Vec::new());
    for (i, &l) in grid.labels().iter().enumerate() {
        if l == EMPTY {
            free.push(i)
        } else {
            occ.push(i)
        }
    }
    let n_occ = match (occ.is_empty(), free.is_empty()) {
        (true, _) => 0,
        (_, true) => p,
        _ => p / 2,
    };
    let mut out = Vec::with_capacity(p);
    out.extend((0..n_occ).map(|_| occ[rng.random_range(0..occ.len())]));
    out.extend((n_occ..p).map(|_| free[rng.random_range(0..free.len())]));
    out
}

/// Forward pass of the training objective for one scene.
pub fn scene_loss<'a, T: Element>(
    model: &TriplaneAutoencoder<T>,
    cx: Ctx<'a, T>,
    grid: &VoxelGrid,
    sample: &[usize],
    alpha: f64,
) -> Result<(Var<'a, T>, Var<'a, T>, Option<Var<'a, T>>), AeError> {
    let dims = grid.dims();
    let planes = model.encode_vars(cx, grid)?;
    let labels: Vec<usize> = grid.labels().iter().map(|&l| l as usize).collect();
    let point_labels: Vec<usize> = sample.iter().map(|&i| labels[i]).collect();
    if alpha > 0.0 {
        let coords = voxel_centers(dims);
        let feats = model.query_vars(planes, &coords, dims)?;
        let logits = model.decode_vars(cx, feats, &coords, dims)?;
        let points = logits.embedding(sample)?;
        ae_loss(points, &point_labels, Some(logits), &labels, alpha)
    } else {
        let all = voxel_centers(dims);
        let coords: Vec<[f64; 3]> = sample.iter().map(|&i| all[i]).collect();
        let feats = model.query_vars(planes, &coords, dims)?;
        let logits = model.decode_vars(cx, feats, &coords, dims)?;
        ae_loss(logits, &point_labels, None, &labels, alpha)
    }
}

pub struct TrainedAutoencoder {
    pub model: TriplaneAutoencoder<f32>,
    pub curve: Vec<EpochLog>,
}

pub fn train_autoencoder(
    scenes: &[VoxelGrid],
    cfg: &AeTrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainedAutoencoder, AeError> {
    let first = scenes.first().ok_or(AeError::EmptyDataset)?;
    let mut arch = cfg.arch;
    arch.num_classes = first.num_classes() as usize;
    for g in scenes {
        if g.dims() != first.dims() || g.num_classes() != first.num_classes() {
            return Err(AeError::Shape("all training scenes must share dims and class count".into()));
        }
    }
    arch.mask_dims(first.dims())?;
    let mut model = TriplaneAutoencoder::<f32>::new(arch, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5ca1ab1e));
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut lov_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let mut acc = GradAccumulator::new(model.params().len());
            for &i in batch {
                let sample = sample_points(&scenes[i], cfg.points, &mut rng);
                let tape = Tape::new();
                let cx = Ctx::new(&tape, model.params());
                let (total, ce, lov) = scene_loss(&model, cx, &scenes[i], &sample, cfg.alpha)?;
                let t = total.value().data()[0] as f64;
                if !t.is_finite() {
                    return Err(AeError::Diverged { epoch, step, detail: format!("loss {t} on scene {i}") });
                }
                tot_sum += t;
                ce_sum += ce.value().data()[0] as f64;
                lov_sum += lov.map_or(0.0, |l| l.value().data()[0] as f64);
                acc.add(&tape.backward(total)?);
            }
            if let StepOutcome::SkippedNonFinite { param } = adam.step(model.params_mut(), &acc.mean()) {
                return Err(AeError::Diverged { epoch, step, detail: format!("non-finite gradient for {param}") });
            }
            step += 1;
        }
        let n = scenes.len() as f64;
        let log = EpochLog {
            epoch,
            ce: ce_sum / n,
            lovasz: lov_sum / n,
            total: tot_sum / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&log);
        curve.push(log);
        if cfg.time_limit_secs.is_some_and(|l| log.seconds >= l) {
            break;
        }
    }
    if cfg.standardize {
        let planes = scenes.iter().map(|g| model.encode(g)).collect::<Result<Vec<_>, _>>()?;
        model.set_stats(Some(LatentStats::compute(&planes)));
    }
    Ok(TrainedAutoencoder { model, curve })
}

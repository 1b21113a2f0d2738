//! Command-line front end.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ssed::autoencoder::{train_autoencoder, write_loss_csv, AeTrainConfig, TriplaneAutoencoder};
use ssed::config::KeyValues;
use ssed::diffusion::{
    bench_sampling, generate_scene, train_diffusion, write_bench_csv, write_diffusion_csv, DiffusionModel,
    DiffusionTrainConfig, LatentExample, SamplerConfig, Strategy,
};
use ssed::numerics::{load_checkpoint, save_checkpoint};
use ssed::trimask::{decompose_scene, scene_assets, AssetLibrary, Bbox, PasteMode, SceneMaskSet};
use ssed::voxel::{
    generate_toy_set, iou, miou, per_class_iou, read_scene_file, write_scene_file, ToySceneSpec, VoxelGrid,
};

use crate::api::{router, AppState};
use crate::jobs::{JobQueue, ModelGenerator, QueueConfig, SceneGenerator};
use crate::spec::{apply_edit, MaskEdit, Placement, Pose, SceneSpec};
use crate::store::{palette_for, Store};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "ssed", version, about = "Mask-conditional semantic scene generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded toy set as SSV1 files.
    MakeToyset {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value = "32,32,8", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the triplane autoencoder on a directory of SSV1 scenes.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file over the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Train the latent diffusion model against a trained autoencoder.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Split a scene into per-class scene-level assets.
    Decompose {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_lib: PathBuf,
        /// Asset id prefix, defaults to the file stem.
        #[arg(long)]
        prefix: Option<String>,
        /// Also write the whole mask set as TMSS.
        #[arg(long)]
        out_masks: Option<PathBuf>,
        #[command(flatten)]
        factors: Factors,
    },
    /// Generate a scene from a spec or a mask set.
    Generate {
        #[arg(long, conflicts_with = "masks", requires = "lib")]
        spec: Option<PathBuf>,
        #[arg(long)]
        lib: Option<PathBuf>,
        #[arg(long, required_unless_present = "spec")]
        masks: Option<PathBuf>,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        diff: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one mask edit to a scene (SSV1) or mask set (TMSS) and write TMSS.
    Edit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_parser = ["erase", "paste", "widen-road"])]
        op: String,
        /// Op arguments as `key=value`.
        #[arg(long = "args", num_args = 1.., value_delimiter = ' ')]
        args: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        factors: Factors,
    },
    /// IoU, mIoU and per-class IoU of two SSV1 scenes, as JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Mean sampling wall time per strategy and step count, as CSV.
    BenchSampling {
        #[arg(long)]
        diff: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value = "ddpm,repaint", value_delimiter = ',')]
        strategies: Vec<Strategy>,
        #[arg(long, default_value = "10,20,100", value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        resample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "SSED_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "SSED_LIB")]
        lib: PathBuf,
        /// Directory holding `ae.ssck` and `diffusion.ssck`.
        #[arg(long)]
        ckpts: Option<PathBuf>,
        #[arg(long, env = "SSED_CKPT_AE")]
        ae: Option<PathBuf>,
        #[arg(long, env = "SSED_CKPT_DIFF")]
        diff: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 64)]
        capacity: usize,
    },
}

/// Voxels per mask cell.
#[derive(Args, Debug, Clone, Copy)]
pub struct Factors {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub d_z: usize,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct SamplerArgs {
    #[arg(long, default_value = "ddpm")]
    pub sampler: Strategy,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = 5)]
    pub resample: usize,
    #[arg(long, default_value_t = 1)]
    pub jump: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplerArgs {
    pub fn config(&self) -> SamplerConfig {
        SamplerConfig {
            strategy: self.sampler,
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            resample: self.resample,
            jump: self.jump,
            seed: self.seed,
            ..Default::default()
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected x,y,z, got {s:?}"))
}

fn parse_offset(s: &str) -> Result<[i64; 3], String> {
    let v: Vec<i64> = s.split(',').map(|p| p.trim().parse::<i64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[i64; 3]>::try_from(v).map_err(|_| format!("expected x,y,z, got {s:?}"))
}

pub fn load_ae(path: &Path) -> CliResult<TriplaneAutoencoder<f32>> {
    Ok(TriplaneAutoencoder::from_checkpoint(&load_checkpoint(path)?)?)
}

pub fn load_diffusion(path: &Path) -> CliResult<DiffusionModel> {
    Ok(DiffusionModel::from_checkpoint(&load_checkpoint(path)?)?)
}

/// Sorted `*.ssv` scenes of a directory.
pub fn load_scenes(dir: &Path) -> CliResult<Vec<VoxelGrid>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ssv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .ssv scenes in {}", dir.display()).into());
    }
    paths.iter().map(|p| Ok(read_scene_file(p)?.0)).collect()
}

fn load_kv(path: Option<&Path>) -> CliResult<KeyValues> {
    Ok(match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::parse("")?,
    })
}

/// Reads TMSS directly, or decomposes an SSV1 scene.
pub fn load_maskset(path: &Path, f: Factors) -> CliResult<SceneMaskSet> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"TMSS") {
        Ok(SceneMaskSet::read(bytes.as_slice())?)
    } else {
        let (grid, _) = ssed::voxel::read_scene(bytes.as_slice())?;
        Ok(decompose_scene(&grid, f.d, f.d_z)?)
    }
}

fn kv_args(args: &[String]) -> CliResult<BTreeMap<String, String>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("expected key=value, got {a:?}").into())
        })
        .collect()
}

fn take<T: std::str::FromStr>(m: &mut BTreeMap<String, String>, key: &str) -> CliResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    m.remove(key).map(|v| v.parse::<T>().map_err(|e| format!("{key}={v}: {e}").into())).transpose()
}

fn need<T: std::str::FromStr>(m: &mut BTreeMap<String, String>, key: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    take(m, key)?.ok_or_else(|| format!("missing {key}=").into())
}

/// Applies one `edit` op given as `key=value` arguments.
pub fn edit_maskset(set: &SceneMaskSet, op: &str, args: &[String]) -> CliResult<SceneMaskSet> {
    let mut m = kv_args(args)?;
    let out = match op {
        "erase" => {
            let class = need(&mut m, "class")?;
            let lo = parse_dims(&need::<String>(&mut m, "lo")?)?;
            let hi = parse_dims(&need::<String>(&mut m, "hi")?)?;
            apply_edit(set, &MaskEdit::Erase { class, bbox: Bbox::new(lo, hi)? })?
        }
        "widen-road" => {
            let class = take(&mut m, "class")?.unwrap_or(ssed::voxel::ROAD);
            apply_edit(set, &MaskEdit::WidenRoad { class, cells: take(&mut m, "cells")?, factor: take(&mut m, "factor")? })?
        }
        "paste" => {
            let lib = AssetLibrary::open(need::<String>(&mut m, "lib")?)?;
            let asset = lib.get(&need::<String>(&mut m, "asset")?)?;
            let pose = Pose {
                offset: take::<String>(&mut m, "offset")?.map(|s| parse_offset(&s)).transpose()?.unwrap_or_default(),
                rotate: take(&mut m, "rotate")?.unwrap_or(0),
                mirror_x: take(&mut m, "mirror_x")?.unwrap_or(false),
                mirror_y: take(&mut m, "mirror_y")?.unwrap_or(false),
            };
            let mode = match take::<String>(&mut m, "mode")?.as_deref() {
                None | Some("union") => PasteMode::Union,
                Some("replace") => PasteMode::Replace,
                Some(o) => return Err(format!("unknown paste mode {o:?}").into()),
            };
            let placed = Placement { asset: asset.id.clone(), pose, mode };
            let posed = placed.pose.apply(&asset)?;
            ssed::trimask::paste_asset(set, &posed, pose.offset, mode)?
        }
        other => return Err(format!("unknown op {other:?}").into()),
    };
    if let Some(k) = m.keys().next() {
        return Err(format!("unexpected argument {k}= for {op}").into());
    }
    Ok(out)
}

/// Composes a spec file against a library directory.
pub fn compose_spec(spec: &Path, lib: &Path) -> CliResult<SceneMaskSet> {
    let spec: SceneSpec = serde_json::from_slice(&fs::read(spec)?)?;
    let lib = AssetLibrary::open(lib)?;
    Ok(spec.compose(|id| lib.get(id).map_err(Into::into))?)
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::MakeToyset { n, dims, seed, out } => {
            fs::create_dir_all(&out)?;
            let scenes = generate_toy_set(&ToySceneSpec::new(dims, seed), n)?;
            for (i, g) in scenes.iter().enumerate() {
                write_scene_file(g, &palette_for(g.num_classes()), out.join(format!("scene-{i:04}.ssv")))?;
            }
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::TrainAe { data, config, out, loss_csv } => {
            let scenes = load_scenes(&data)?;
            let cfg = AeTrainConfig::from_kv(&load_kv(config.as_deref())?)?;
            let trained = train_autoencoder(&scenes, &cfg, |e| {
                println!("epoch {:>4}  ce {:.4}  lovasz {:.4}  total {:.4}  {:.0}s", e.epoch, e.ce, e.lovasz, e.total, e.seconds)
            })?;
            save_checkpoint(&trained.model.to_checkpoint(), &out)?;
            if let Some(p) = loss_csv {
                write_loss_csv(&trained.curve, p)?;
            }
        }
        Command::TrainDiffusion { data, ae, config, out, loss_csv } => {
            let scenes = load_scenes(&data)?;
            let ae = load_ae(&ae)?;
            let cfg = DiffusionTrainConfig::from_kv(&load_kv(config.as_deref())?)?;
            let examples = scenes.iter().map(|g| LatentExample::from_scene(&ae, g)).collect::<Result<Vec<_>, _>>()?;
            let every = (cfg.iterations / 20).max(1);
            let trained = train_diffusion(&examples, ae.stats().cloned(), &cfg, |l| {
                if l.step % every == 0 {
                    println!("step {:>6}  t {:>4}  loss {:.5}  {:.0}s", l.step, l.t, l.loss, l.seconds)
                }
            })?;
            save_checkpoint(&trained.model.to_checkpoint(), &out)?;
            if let Some(p) = loss_csv {
                write_diffusion_csv(&trained.curve, p)?;
            }
        }
        Command::Decompose { scene, out_lib, prefix, out_masks, factors } => {
            let (grid, palette) = read_scene_file(&scene)?;
            let prefix = prefix.unwrap_or_else(|| scene.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let mut lib = AssetLibrary::open(&out_lib)?;
            for a in scene_assets(&grid, &prefix, &palette.names, factors.d, factors.d_z)? {
                let e = lib.put(&a)?;
                println!("{}  class {}", e.id, e.class_id);
            }
            if let Some(p) = out_masks {
                fs::write(p, decompose_scene(&grid, factors.d, factors.d_z)?.to_bytes())?;
            }
        }
        Command::Generate { spec, lib, masks, ae, diff, sampler, out } => {
            let set = match (spec, masks) {
                (Some(s), None) => compose_spec(&s, lib.as_deref().ok_or("--spec needs --lib")?)?,
                (None, Some(m)) => load_maskset(&m, Factors { d: 2, d_z: 1 })?,
                _ => return Err("give exactly one of --spec or --masks".into()),
            };
            let ae = load_ae(&ae)?;
            let model = load_diffusion(&diff)?;
            let grid = generate_scene(&set, &model, &ae, &sampler.config(), None)?;
            write_scene_file(&grid, &palette_for(grid.num_classes()), &out)?;
            println!("{} occupied voxels -> {}", grid.occupied(), out.display());
        }
        Command::Edit { scene, op, args, out, factors } => {
            let set = load_maskset(&scene, factors)?;
            let edited = edit_maskset(&set, &op, &args)?;
            fs::write(&out, edited.to_bytes())?;
            for (a, b) in set.masks().iter().zip(edited.masks()).skip(1) {
                if a != b {
                    println!("class {}: xy {} -> {}", a.class_id, a.xy.count(), b.xy.count());
                }
            }
        }
        Command::Eval { pred, gt } => {
            let (p, _) = read_scene_file(pred)?;
            let (g, _) = read_scene_file(gt)?;
            let report = serde_json::json!({ "iou": iou(&p, &g)?, "miou": miou(&p, &g)?, "per_class": per_class_iou(&p, &g)? });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::BenchSampling { diff, masks, strategies, steps, runs, resample, seed, out } => {
            let model = load_diffusion(&diff)?;
            let set = load_maskset(&masks, Factors { d: 2, d_z: 1 })?;
            let base = SamplerConfig { resample, seed, ..Default::default() };
            let rows = bench_sampling(&model, &set, &base, &strategies, &steps, runs)?;
            println!("strategy,steps,wall_seconds");
            for r in &rows {
                println!("{:?},{},{:.6}", r.strategy, r.steps, r.wall_seconds);
            }
            if let Some(p) = out {
                write_bench_csv(&rows, p)?;
            }
        }
        Command::Serve { port, lib, ckpts, ae, diff, workers, capacity } => {
            let ae = ae.or_else(|| ckpts.as_ref().map(|d| d.join("ae.ssck")));
            let diff = diff.or_else(|| ckpts.as_ref().map(|d| d.join("diffusion.ssck")));
            let generator: Option<Arc<dyn SceneGenerator>> = match (ae, diff) {
                (Some(a), Some(d)) => Some(Arc::new(ModelGenerator::new(load_ae(&a)?, load_diffusion(&d)?)?)),
                _ => {
                    tracing::warn!("no checkpoints given; job submission will return 503");
                    None
                }
            };
            let store = Arc::new(Store::open(&lib)?);
            let jobs = JobQueue::start(store.clone(), generator, QueueConfig { workers, capacity })?;
            let app = router(Arc::new(AppState { store, jobs }));
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
    }
    Ok(())
}

//! Generate a scene from a held-out toy trimask with both samplers.
//!
//! With checkpoint paths the trained models are loaded, otherwise a small
//! autoencoder and denoiser are trained on a handful of 16×16×4 scenes first
//! (about a minute).
//!
//! cargo run --release --example sample_scene -- [ae.ssck diffusion.ssck]

use std::time::Instant;

use ssed::autoencoder::{train_autoencoder, AeArch, AeTrainConfig, TriplaneAutoencoder};
use ssed::diffusion::{generate_scene, train_diffusion, DiffusionModel, DiffusionTrainConfig, LatentExample, SamplerConfig, Strategy};
use ssed::numerics::load_checkpoint;
use ssed::trimask::decompose_scene;
use ssed::voxel::{generate_toy_scene, generate_toy_set, ToySceneSpec, TOY_CLASS_NAMES};

type Models = (TriplaneAutoencoder<f32>, DiffusionModel);

fn train_small() -> Result<Models, Box<dyn std::error::Error>> {
    let scenes = generate_toy_set(&ToySceneSpec::new([16, 16, 4], 100), 8)?;
    let arch = AeArch { c_z: 8, dec_width: 64, dec_layers: 3, ..AeArch::default() };
    let ae = train_autoencoder(&scenes, &AeTrainConfig { arch, epochs: 40, lr: 1e-2, ..Default::default() }, |_| {})?.model;
    let examples = scenes.iter().map(|g| LatentExample::from_scene(&ae, g)).collect::<Result<Vec<_>, _>>()?;
    let cfg = DiffusionTrainConfig { base: 16, iterations: 600, lr: 5e-4, ..Default::default() };
    let trained = train_diffusion(&examples, ae.stats().cloned(), &cfg, |s| {
        if s.step % 100 == 0 {
            println!("diffusion step {:>4}  loss {:.4}", s.step, s.loss);
        }
    })?;
    Ok((ae, trained.model))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (ae, model) = match args.as_slice() {
        [a, d] => (TriplaneAutoencoder::from_checkpoint(&load_checkpoint(a)?)?, DiffusionModel::from_checkpoint(&load_checkpoint(d)?)?),
        _ => train_small()?,
    };
    let dims = model.check_autoencoder(&ae)?;
    let arch = ae.arch();
    let cond = generate_toy_scene(&ToySceneSpec::new(dims, 5000))?;
    let set = decompose_scene(&cond, arch.d, arch.d_z)?;

    for strategy in [Strategy::Ddpm, Strategy::Repaint] {
        let sampler = SamplerConfig { strategy, steps: 50, seed: 1, ..Default::default() };
        let start = Instant::now();
        let mut steps = 0;
        let out = generate_scene(&set, &model, &ae, &sampler, Some(&mut |_, _| steps += 1))?;
        let got = decompose_scene(&out, arch.d, arch.d_z)?;
        println!("{strategy:?}: {steps} sampling steps in {:.2}s", start.elapsed().as_secs_f64());
        for c in 1..set.num_classes() {
            let (a, b) = (&got.class(c)?.xy, &set.class(c)?.xy);
            let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
            let union = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x || **y).count();
            if union > 0 {
                println!("  {:>11} footprint IoU {:.3}", TOY_CLASS_NAMES[c as usize], inter as f64 / union as f64);
            }
        }
    }
    Ok(())
}

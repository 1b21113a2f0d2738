//! Train the triplane autoencoder on a toy set and report reconstruction
//! quality.
//!
//! cargo run --release --example train_autoencoder -- [scenes] [epochs]

use ssed::autoencoder::{train_autoencoder, AeTrainConfig};
use ssed::voxel::{generate_toy_set, iou, IouAccumulator, ToySceneSpec, TOY_CLASS_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let scenes = generate_toy_set(&ToySceneSpec::new([32, 32, 8], 100), n)?;
    let cfg = AeTrainConfig { epochs, ..Default::default() };
    let trained = train_autoencoder(&scenes, &cfg, |e| {
        println!("epoch {:>3}  ce {:.4}  lovasz {:.4}  total {:.4}  ({:.0}s)", e.epoch, e.ce, e.lovasz, e.total, e.seconds)
    })?;
    let mut acc = IouAccumulator::new(8);
    let mut occ = 0.0;
    for g in &scenes {
        let r = trained.model.roundtrip(g)?;
        acc.add(&r, g)?;
        occ += iou(&r, g)?;
    }
    for (c, v) in acc.per_class().iter().enumerate().skip(1) {
        println!("{:>11} {}", TOY_CLASS_NAMES[c], v.map_or("-".into(), |v| format!("{v:.3}")));
    }
    println!("mIoU {:.3}  IoU {:.3}", acc.miou(), occ / scenes.len() as f64);
    Ok(())
}

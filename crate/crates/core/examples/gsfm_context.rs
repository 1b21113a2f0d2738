//! Run the geometric-semantic fusion module on a toy mask set and compare
//! the context it produces under each ablation.
//!
//! cargo run --example gsfm_context

use ssed::gsfm::{concat_trimask, Ablation, Gsfm, GsfmConfig};
use ssed::numerics::{ParamStore, Tensor};
use ssed::trimask::decompose_scene;
use ssed::voxel::{generate_toy_scene, ToySceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], 7))?;
    let set = decompose_scene(&grid, 2, 1)?;
    let map = concat_trimask(&set);
    let (h, w) = map.hw();
    println!("concatenated mask map: {} classes × {h}×{w}", set.num_classes());

    let c_z = 16;
    let [x, y, z] = set.dims();
    let planes = [Tensor::<f32>::full(&[c_z, x, y], 0.5), Tensor::full(&[c_z, x, z], -0.5), Tensor::full(&[c_z, y, z], 0.25)];
    let full = Ablation::default();
    let mut variants = vec![("full", full)];
    variants.extend(Ablation::table());
    for (name, flags) in variants {
        let cfg = GsfmConfig { flags, ..GsfmConfig::new(set.num_classes() as usize, set.dims(), c_z) };
        let mut store = ParamStore::new();
        let g = Gsfm::new(&mut store, "gsfm", cfg, 0)?;
        let ctx = g.forward(&store, &set, [&planes[0], &planes[1], &planes[2]])?;
        let norm = ctx.tokens.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        println!(
            "{name:<22} tokens {:?}  |tokens| {norm:8.3}  params {:>6}  geometric {} semantic {}",
            ctx.tokens.shape(),
            store.numel(),
            ctx.e_m.is_some(),
            ctx.e_sem.is_some()
        );
    }
    Ok(())
}

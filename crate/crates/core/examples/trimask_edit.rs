//! Decompose a toy scene into trimasks, store them as assets, then remove a
//! vehicle, widen the road and paste a rotated vehicle back in.
//!
//! cargo run --example trimask_edit -- [seed]

use ssed::trimask::{
    decompose_scene, erase_region, paste_asset, scene_assets, widen_road, AssetFilter, AssetKind, AssetLibrary,
    PasteMode, Plane, SceneMaskSet, Transform,
};
use ssed::voxel::{generate_toy_scene, ToySceneSpec, ROAD, TOY_CLASS_NAMES, VEHICLE};

fn show(title: &str, set: &SceneMaskSet) -> Result<(), Box<dyn std::error::Error>> {
    let road = &set.class(ROAD)?.xy;
    let car = &set.class(VEHICLE)?.xy;
    println!("{title}: road {} cells, vehicle {} cells", road.count(), car.count());
    let glyph = |p: &Plane, r, c| p.get(r, c);
    for c in (0..road.cols()).rev() {
        let row: String =
            (0..road.rows()).map(|r| if glyph(car, r, c) { 'V' } else if glyph(road, r, c) { '=' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let grid = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], seed))?;
    let set = decompose_scene(&grid, 2, 1)?;
    show("decomposed", &set)?;

    let dir = std::env::temp_dir().join(format!("trimask_edit_{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let mut lib = AssetLibrary::open(&dir)?;
    let names: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    for asset in scene_assets(&grid, &format!("toy{seed}"), &names, 2, 1)? {
        lib.put(&asset)?;
    }
    let filter = AssetFilter { kind: Some(AssetKind::SceneLevel), ..Default::default() };
    println!("library {}: {:?}", dir.display(), lib.list(filter).iter().map(|e| e.id.as_str()).collect::<Vec<_>>());

    let Some(bbox) = set.class(VEHICLE)?.bbox() else {
        println!("no vehicles in this scene, try another seed");
        return Ok(());
    };
    let erased = erase_region(&set, VEHICLE, bbox)?;
    show("vehicles erased", &erased)?;

    let wide = widen_road(&erased, ROAD, 1)?;
    show("road widened by one cell per side", &wide)?;

    let car = lib.get(&format!("toy{seed}-vehicle"))?;
    let turned = car.transform(Transform::Rotate90Z)?;
    let placed = paste_asset(&wide, &turned, [0, 0, 0], PasteMode::Union)?;
    show("rotated vehicle layer pasted back", &placed)?;
    Ok(())
}

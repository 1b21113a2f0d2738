//! Generate a toy city block, print a top-down view and per-class counts, and
//! round-trip it through an SSV1 file.
//!
//! cargo run --example toy_city -- [seed]

use ssed::voxel::{generate_toy_scene, read_scene_file, write_scene_file, ClassPalette, ToySceneSpec, TOY_CLASS_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let grid = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], seed))?;
    let [dx, dy, dz] = grid.dims();
    let glyphs = ['.', '=', '-', '#', 'V', 'p', '*', '|'];
    for y in (0..dy).rev() {
        let row: String = (0..dx)
            .map(|x| {
                let top = (0..dz).rev().map(|z| grid.get(x, y, z)).find(|&l| l != 0).unwrap_or(0);
                glyphs[top as usize]
            })
            .collect();
        println!("{row}");
    }
    for (c, name) in TOY_CLASS_NAMES.iter().enumerate() {
        println!("{:>11} {:>5}", name, grid.class_count(c as u16));
    }
    let path = std::env::temp_dir().join(format!("toy_city_{seed}.ssv"));
    let bytes = write_scene_file(&grid, &ClassPalette::toy(), &path)?;
    let (back, _) = read_scene_file(&path)?;
    assert_eq!(back, grid);
    println!("wrote {} ({bytes} bytes), read back identical", path.display());
    Ok(())
}

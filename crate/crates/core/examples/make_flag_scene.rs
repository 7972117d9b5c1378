//! Writes the bundled flag scene: `cargo run --example make_flag_scene [DIR]`.

use std::fs;
use std::path::PathBuf;

use loopfield::cloud_io::save_ply;
use loopfield::synthetic::{flag_cameras_json, flag_config_json, flag_scene};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/flag"));
    fs::create_dir_all(&dir)?;
    let scene = flag_scene();
    save_ply(&scene.cloud, dir.join("scene.ply"))?;
    fs::write(dir.join("mask.txt"), scene.mask.to_text())?;
    fs::write(dir.join("transforms.json"), flag_cameras_json())?;
    fs::write(dir.join("config.json"), flag_config_json())?;
    println!("wrote flag scene to {}", dir.display());
    Ok(())
}

//! Generate a synthetic scene and write one PNG per camera.
//!
//! cargo run --release --example render_scene -- [seed] [out_dir]

use std::path::PathBuf;

use splatrefine::image_io::Image;
use splatrefine::rasterizer::rasterize;
use splatrefine::synthscene::{generate, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("renders"));
    std::fs::create_dir_all(&out)?;

    let scene = generate(&SceneSpec {
        seed,
        ..SceneSpec::default()
    })?;
    for (i, cam) in scene.cameras.iter().enumerate() {
        let r = rasterize(&scene.cloud, cam)?;
        let path = out.join(format!("view_{i:03}.png"));
        Image::from_render(&r).write_png(&path)?;
        let tag = if scene.split.is_test(i) { "test" } else { "train" };
        println!("{} {tag} mean overdraw {:.2}", path.display(), r.mean_overdraw());
    }
    Ok(())
}

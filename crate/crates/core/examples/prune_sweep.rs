//! Prune a two-population cloud at several opacity weights and show which
//! population survives, how large the file gets and how the views degrade.
//!
//! cargo run --release --example prune_sweep

use splatrefine::image_io::Image;
use splatrefine::metrics::psnr;
use splatrefine::pruner::{prune, PruneConfig};
use splatrefine::rasterizer::rasterize;
use splatrefine::synthscene::{mixture_cloud, orbit_cameras, Population, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        seed: 8,
        n_gaussians: 800,
        ..SceneSpec::default()
    };
    let mix = mixture_cloud(&spec)?;
    let cams = orbit_cameras(&spec)?;
    let targets: Vec<Image> = cams
        .iter()
        .map(|c| rasterize(&mix.cloud, c).map(|r| Image::from_render(&r)))
        .collect::<Result<_, _>>()?;
    println!("dense: {} Gaussians, {} bytes", mix.cloud.len(), mix.cloud.ply_size_bytes());
    println!("lambda  kept  small-opaque  bytes    psnr");
    for lambda in [0.0, 0.1, 0.3, 0.5, 0.9, 1.0] {
        let (pruned, rep) = prune(&mix.cloud, &PruneConfig::with_fraction(lambda, 0.5))?;
        let small = rep.selected.iter().filter(|&&i| mix.labels[i] == Population::SmallOpaque).count();
        let mut total = 0.0;
        for (c, t) in cams.iter().zip(&targets) {
            total += psnr(&Image::from_render(&rasterize(&pruned, c)?), t)?;
        }
        println!(
            "{lambda:<6}  {:<4}  {small:<12}  {:<7}  {:.2}",
            pruned.len(),
            pruned.ply_size_bytes(),
            total / cams.len() as f64
        );
    }
    Ok(())
}

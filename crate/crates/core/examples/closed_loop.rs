//! Synthesize a scene, keep half of it, train the refiner and compare
//! held-out PSNR before and after refinement.
//!
//! cargo run --release --example closed_loop -- [seed] [n_gaussians] [iterations] [variant]

use std::time::Instant;

use splatrefine::encoder::{EncoderConfig, EncoderVariant};
use splatrefine::pipeline::{fit_scene, PrunedScene};
use splatrefine::pruner::PruneConfig;
use splatrefine::refiner::{RefinerConfig, TrainConfig};
use splatrefine::synthscene::SceneSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let seed: u64 = arg(0, "0").parse()?;
    let n: usize = arg(1, "600").parse()?;
    let iterations: usize = arg(2, "500").parse()?;
    let variant: EncoderVariant = arg(3, "full").parse()?;

    let spec = SceneSpec {
        seed,
        n_gaussians: n,
        ..SceneSpec::default()
    };
    let scene = PrunedScene::new(&spec, &PruneConfig::with_fraction(0.3, 0.5))?;
    let baseline = scene.heldout_psnr(&scene.pruned)?;
    println!(
        "scene seed={seed}: {} -> {} Gaussians, held-out PSNR pruned {baseline:.3} dB",
        scene.dense.len(),
        scene.pruned.len()
    );

    let train_cfg = TrainConfig {
        iterations,
        seed,
        ..TrainConfig::desk()
    };
    let encoder = EncoderConfig {
        variant,
        ..EncoderConfig::desk()
    };
    let t0 = Instant::now();
    let (_, refined, log) = fit_scene(&scene, encoder, RefinerConfig::desk(), &train_cfg, |r| {
        if r.iter % 50 == 0 {
            println!("  {r}");
        }
    })?;
    let refined_psnr = scene.heldout_psnr(&refined)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("loss {:.5} -> {:.5}", first.total, last.total);
    }
    println!(
        "held-out PSNR refined {refined_psnr:.3} dB (gain {:+.3} dB) in {:.1}s",
        refined_psnr - baseline,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

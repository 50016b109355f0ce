//! Backpropagate a pixel loss through the rasterizer and compare one
//! gradient entry with a finite difference.
//!
//! cargo run --release --example raster_gradients

use splatrefine::rasterizer::{rasterize_backward, rasterize_params, SplatParams};
use splatrefine::synthscene::{generate, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate(&SceneSpec {
        seed: 2,
        n_gaussians: 5,
        width: 16,
        height: 16,
        ..SceneSpec::default()
    })?;
    let cam = &scene.cameras[0];
    let params = SplatParams::<f64>::from_cloud(&scene.cloud);
    // d(sum of red channel) / d(params)
    let upstream: Vec<f64> = (0..16 * 16 * 3).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let grads = rasterize_backward(&params, cam, &upstream)?;
    let loss = |p: &SplatParams<f64>| -> f64 { rasterize_params(p, cam).unwrap().rgb.iter().step_by(3).sum() };

    let eps = 1e-6;
    for axis in 0..3 {
        let (mut hi, mut lo) = (params.clone(), params.clone());
        hi.positions[axis] += eps;
        lo.positions[axis] -= eps;
        let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
        println!("d/dmu[0][{axis}]: analytic {:+.6e}  finite difference {fd:+.6e}", grads.positions[axis]);
    }
    Ok(())
}

//! Encode a cloud with every encoder variant and summarise the features and
//! the appearance gate.
//!
//! cargo run --release --example encoder_gate

use splatrefine::encoder::{encode, EncoderConfig, EncoderVariant};
use splatrefine::synthscene::{generate, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate(&SceneSpec {
        seed: 4,
        n_gaussians: 200,
        ..SceneSpec::default()
    })?;
    for variant in [
        EncoderVariant::Geometry,
        EncoderVariant::GeometryPosition,
        EncoderVariant::GatedNoPosition,
        EncoderVariant::Full,
    ] {
        let cfg = EncoderConfig {
            variant,
            ..EncoderConfig::desk()
        };
        let params = cfg.init_params::<f32>(0)?;
        let out = encode(&scene.cloud, &cfg, &params)?;
        let f = out.features.data();
        let rms = (f.iter().map(|v| v * v).sum::<f32>() / f.len() as f32).sqrt();
        print!("{variant:<20} features {:?} rms {rms:.4}", out.features.shape());
        if let Some(g) = &out.gate {
            let max = g.data().iter().fold(0.0f32, |m, &v| m.max(v));
            print!("  gate max {max:.4} (uniform {:.4})", 1.0 / cfg.feature_width as f32);
        }
        println!();
    }
    Ok(())
}

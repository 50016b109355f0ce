//! Local-attention refinement of encoded features, residual parameter heads,
//! the training loss and the training loop.
//!
//! Pipeline for one pruned cloud:
//!
//! 1. encode every Gaussian ([`crate::encoder`]);
//! 2. run attention stages over k-NN neighbourhoods, grid-pooling between
//!    stages and unpooling back with skip additions;
//! 3. project the trunk into geometry and appearance features, map them to
//!    10 and 49 deltas, and add the scaled deltas to the raw parameters;
//! 4. rasterize.
//!
//! The last layer of both delta MLPs starts at zero, so an untrained model
//! reproduces its input exactly.

pub mod graph;
pub mod loss;
pub mod network;
pub mod residual;
pub mod train;

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::config::{ConfigError, FlatConfig};
use crate::encoder::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::encoder::{encode_on_tape, EncoderConfig, EncoderError, EncoderInputs};
use crate::gaussians::GaussianCloud;
use crate::image_io::ImageError;
use crate::metrics::MetricError;
use crate::nn::{Bound, ParamSet};
use crate::rasterizer::RasterError;
use crate::real::Real;

pub use graph::{build_hierarchy, grid_pool, knn_graph, GridPool, KnnGraph, Level};
pub use loss::{image_loss, image_loss_on_tape, LossParts, PERCEPTUAL_WEIGHT};
pub use network::{attention_block, refine_features_on_tape, RefinerConfig, ResidualScales, Stage};
pub use residual::{apply_residual, render_on_tape, residual_on_tape, Deltas, ParamTensors, ParamVars};
pub use train::{lr_at, train, LogRecord, TrainConfig, TrainScene};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refiner config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("no training data: {0}")]
    NoData(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, RefineError>;

/// Encoder and refiner configuration together with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub refiner: RefinerConfig,
    pub params: ParamSet<f32>,
}

pub const MODEL_KEYS: &[&str] = &[
    "encoder.feature_width",
    "encoder.sh_reduced_dim",
    "encoder.hidden",
    "encoder.variant",
    "encoder.gate_axis",
    "refiner.stages",
    "refiner.knn_k",
    "refiner.heads",
    "refiner.head_hidden",
    "refiner.zero_init_deltas",
    "residual.position",
    "residual.rotation",
    "residual.log_scale",
    "residual.opacity",
    "residual.sh",
];

impl Model {
    pub fn init(encoder: EncoderConfig, mut refiner: RefinerConfig, seed: u64) -> Result<Self> {
        refiner.feature_width = encoder.feature_width;
        let mut params = encoder.init_params(seed)?;
        refiner.init_params(seed.wrapping_add(1), &mut params)?;
        Ok(Self {
            encoder,
            refiner,
            params,
        })
    }

    pub fn desk(seed: u64) -> Result<Self> {
        Self::init(EncoderConfig::desk(), RefinerConfig::desk(), seed)
    }

    pub fn to_config_text(&self) -> String {
        let (e, r, s) = (&self.encoder, &self.refiner, &self.refiner.residual_scales);
        let stages: Vec<String> = r.stages.iter().map(|st| format!("{}:{}", st.blocks, st.ratio)).collect();
        let mut t = String::new();
        writeln!(t, "encoder.feature_width = {}", e.feature_width).unwrap();
        writeln!(t, "encoder.sh_reduced_dim = {}", e.sh_reduced_dim).unwrap();
        writeln!(t, "encoder.hidden = {}", e.hidden).unwrap();
        writeln!(t, "encoder.variant = {}", e.variant).unwrap();
        writeln!(t, "encoder.gate_axis = {}", e.gate_axis).unwrap();
        writeln!(t, "refiner.stages = {}", stages.join(",")).unwrap();
        writeln!(t, "refiner.knn_k = {}", r.knn_k).unwrap();
        writeln!(t, "refiner.heads = {}", r.heads).unwrap();
        writeln!(t, "refiner.head_hidden = {}", r.head_hidden).unwrap();
        writeln!(t, "refiner.zero_init_deltas = {}", r.zero_init_deltas).unwrap();
        writeln!(t, "residual.position = {}", s.position).unwrap();
        writeln!(t, "residual.rotation = {}", s.rotation).unwrap();
        writeln!(t, "residual.log_scale = {}", s.log_scale).unwrap();
        writeln!(t, "residual.opacity = {}", s.opacity).unwrap();
        writeln!(t, "residual.sh = {}", s.sh).unwrap();
        t
    }

    /// Configuration from `key = value` text; unspecified keys keep the
    /// desk-scale defaults.
    pub fn configs_from_text(text: &str) -> Result<(EncoderConfig, RefinerConfig)> {
        let cfg = FlatConfig::parse(text)?;
        Self::configs_from_flat(&cfg, true)
    }

    /// Read the model keys of `cfg`; with `strict`, reject any other key.
    pub fn configs_from_flat(cfg: &FlatConfig, strict: bool) -> Result<(EncoderConfig, RefinerConfig)> {
        if strict {
            cfg.check_known(MODEL_KEYS)?;
        }
        let mut e = EncoderConfig::desk();
        let mut r = RefinerConfig::desk();
        cfg.set("encoder.feature_width", &mut e.feature_width)?;
        cfg.set("encoder.sh_reduced_dim", &mut e.sh_reduced_dim)?;
        cfg.set("encoder.hidden", &mut e.hidden)?;
        cfg.set("encoder.variant", &mut e.variant)?;
        cfg.set("encoder.gate_axis", &mut e.gate_axis)?;
        if let Some(list) = cfg.get_list::<String>("refiner.stages")? {
            r.stages = list
                .iter()
                .map(|s| {
                    let (b, q) = s
                        .split_once(':')
                        .ok_or_else(|| RefineError::Config(format!("stage `{s}` is not blocks:ratio")))?;
                    Ok(Stage {
                        blocks: b.parse().map_err(|_| RefineError::Config(format!("stage `{s}`")))?,
                        ratio: q.parse().map_err(|_| RefineError::Config(format!("stage `{s}`")))?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        cfg.set("refiner.knn_k", &mut r.knn_k)?;
        cfg.set("refiner.heads", &mut r.heads)?;
        cfg.set("refiner.head_hidden", &mut r.head_hidden)?;
        cfg.set("refiner.zero_init_deltas", &mut r.zero_init_deltas)?;
        let s = &mut r.residual_scales;
        cfg.set("residual.position", &mut s.position)?;
        cfg.set("residual.rotation", &mut s.rotation)?;
        cfg.set("residual.log_scale", &mut s.log_scale)?;
        cfg.set("residual.opacity", &mut s.opacity)?;
        cfg.set("residual.sh", &mut s.sh)?;
        r.feature_width = e.feature_width;
        e.validate()?;
        r.validate()?;
        Ok((e, r))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_config_text(), &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (text, params) = read_checkpoint(path)?;
        let (encoder, refiner) = Self::configs_from_text(&text)?;
        let expected = Self::init(encoder.clone(), refiner.clone(), 0)?.params;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(RefineError::Shape(format!("`{name}` is {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(RefineError::Encoder(EncoderError::MissingParam(name.into()))),
            }
        }
        Ok(Self {
            encoder,
            refiner,
            params,
        })
    }
}

/// Per-cloud data that does not change during training.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub inputs: EncoderInputs<T>,
    pub levels: Vec<Level>,
    pub base: ParamTensors<T>,
}

impl<T: Real> Prepared<T> {
    pub fn new(cloud: &GaussianCloud, cfg: &RefinerConfig) -> Self {
        let pos: Vec<[f64; 3]> = cloud.iter().map(|g| g.position.map(|c| c as f64)).collect();
        Self {
            inputs: EncoderInputs::from_cloud(cloud),
            levels: build_hierarchy(pos, cfg.knn_k, &cfg.ratios()),
            base: ParamTensors::from_cloud(cloud),
        }
    }
}

/// Everything the forward pass records for one cloud.
pub struct Forward<'t, T> {
    pub features: Var<'t, T>,
    pub fp: Var<'t, T>,
    pub fa: Var<'t, T>,
    pub dp: Var<'t, T>,
    pub da: Var<'t, T>,
    pub params: ParamVars<'t, T>,
}

pub fn forward_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    encoder: &EncoderConfig,
    refiner: &RefinerConfig,
    prep: &Prepared<T>,
) -> Result<Forward<'t, T>> {
    if prep.inputs.is_empty() {
        return Err(RefineError::NoData("empty cloud".into()));
    }
    let enc = encode_on_tape(tape, bound, encoder, &prep.inputs)?;
    let (fp, fa) = refine_features_on_tape(tape, bound, refiner, enc.features, &prep.levels)?;
    let (dp, da) = network::deltas_on_tape(bound, fp, fa)?;
    let params = residual_on_tape(tape, &prep.base, dp, da, &refiner.residual_scales)?;
    Ok(Forward {
        features: enc.features,
        fp,
        fa,
        dp,
        da,
        params,
    })
}

/// Predicted deltas for `cloud`.
pub fn predict_deltas(cloud: &GaussianCloud, model: &Model) -> Result<Deltas> {
    let prep = Prepared::<f32>::new(cloud, &model.refiner);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let f = forward_on_tape(&tape, &bound, &model.encoder, &model.refiner, &prep)?;
    Ok(Deltas {
        geometry: (*f.dp.value()).clone(),
        appearance: (*f.da.value()).clone(),
    })
}

/// Refined copy of `cloud`; same size and order.
pub fn refine(cloud: &GaussianCloud, model: &Model) -> Result<GaussianCloud> {
    if cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let d = predict_deltas(cloud, model)?;
    apply_residual(cloud, &d, &model.refiner.residual_scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_round_trip() {
        let m = Model::desk(3).unwrap();
        let (e, r) = Model::configs_from_text(&m.to_config_text()).unwrap();
        assert_eq!(e, m.encoder);
        assert_eq!(r, m.refiner);
    }
}

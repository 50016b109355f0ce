//! End-to-end helpers: synthesize a scene, prune it, train a refiner on its
//! training views and score held-out views.

use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::gaussians::GaussianCloud;
use crate::image_io::Image;
use crate::metrics::{psnr, MetricError, MetricReport};
use crate::pruner::{prune, PruneConfig, PruneError, ScoreReport};
use crate::rasterizer::Camera;
use crate::refiner::{refine, train, LogRecord, Model, RefineError, RefinerConfig, TrainConfig, TrainScene};
use crate::synthscene::{generate, render_views, SceneError, SceneSpec, Split};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A synthesized scene with ground-truth renders and its pruned cloud.
#[derive(Debug, Clone)]
pub struct PrunedScene {
    pub dense: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub split: Split,
    pub targets: Vec<Image>,
    pub pruned: GaussianCloud,
    pub report: ScoreReport,
}

impl PrunedScene {
    pub fn new(spec: &SceneSpec, prune_cfg: &PruneConfig) -> Result<Self> {
        let scene = generate(spec)?;
        let targets = render_views(&scene.cloud, &scene.cameras)?;
        let (pruned, report) = prune(&scene.cloud, prune_cfg)?;
        Ok(Self {
            dense: scene.cloud,
            cameras: scene.cameras,
            split: scene.split,
            targets,
            pruned,
            report,
        })
    }

    pub fn train_scene(&self) -> TrainScene {
        TrainScene {
            cloud: self.pruned.clone(),
            cameras: self.cameras.clone(),
            targets: self.targets.clone(),
            train_views: self.split.train.clone(),
        }
    }

    /// Held-out report for `cloud` against the ground-truth renders.
    pub fn heldout_report(&self, cloud: &GaussianCloud) -> Result<MetricReport> {
        let cams: Vec<Camera> = self.split.test.iter().map(|&i| self.cameras[i].clone()).collect();
        let renders = render_views(cloud, &cams)?;
        let pairs = self
            .split
            .test
            .iter()
            .zip(&renders)
            .map(|(&i, r)| (format!("view{i:03}"), r, &self.targets[i]));
        Ok(MetricReport::from_pairs(pairs)?)
    }

    pub fn heldout_psnr(&self, cloud: &GaussianCloud) -> Result<f64> {
        Ok(self.heldout_report(cloud)?.psnr)
    }

    /// Mean PSNR over the training views.
    pub fn train_psnr(&self, cloud: &GaussianCloud) -> Result<f64> {
        let cams: Vec<Camera> = self.split.train.iter().map(|&i| self.cameras[i].clone()).collect();
        let renders = render_views(cloud, &cams)?;
        let mut sum = 0.0;
        for (&i, r) in self.split.train.iter().zip(&renders) {
            sum += psnr(r, &self.targets[i])?;
        }
        Ok(sum / renders.len() as f64)
    }
}

/// Train a fresh model on one scene and return it with the refined cloud.
pub fn fit_scene(
    scene: &PrunedScene,
    encoder: EncoderConfig,
    refiner: RefinerConfig,
    train_cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<(Model, GaussianCloud, Vec<LogRecord>)> {
    let mut model = Model::init(encoder, refiner, train_cfg.seed)?;
    let log = train(&[scene.train_scene()], &mut model, train_cfg, on_log)?;
    let refined = refine(&scene.pruned, &model)?;
    Ok((model, refined, log))
}

/// Held-out PSNR of the pruned cloud and of its refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoop {
    pub baseline: f64,
    pub refined: f64,
}

impl ClosedLoop {
    pub fn gain(&self) -> f64 {
        self.refined - self.baseline
    }
}

/// Desk-scale closed loop for one encoder variant.
pub fn closed_loop(scene: &PrunedScene, variant: EncoderVariant, train_cfg: &TrainConfig) -> Result<ClosedLoop> {
    let encoder = EncoderConfig {
        variant,
        ..EncoderConfig::desk()
    };
    let (_, refined, _) = fit_scene(scene, encoder, RefinerConfig::desk(), train_cfg, |_| {})?;
    Ok(ClosedLoop {
        baseline: scene.heldout_psnr(&scene.pruned)?,
        refined: scene.heldout_psnr(&refined)?,
    })
}

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_on_tape, image_loss_on_tape, render_on_tape, Model, Prepared, RefineError, Result};
use crate::autodiff::Tape;
use crate::gaussians::GaussianCloud;
use crate::image_io::Image;
use crate::nn::Adam;
use crate::rasterizer::Camera;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_drop_iter: usize,
    pub lr_drop_factor: f64,
    pub perceptual_weight: f64,
    pub views_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-5,
            lr_drop_iter: 6000,
            lr_drop_factor: 10.0,
            perceptual_weight: 0.1,
            views_per_step: 2,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "train.iterations",
    "train.lr",
    "train.lr_drop_iter",
    "train.lr_drop_factor",
    "train.perceptual_weight",
    "train.views_per_step",
    "train.seed",
];

impl TrainConfig {
    /// 500 iterations with a learning rate suited to training from scratch
    /// on a handful of small scenes.
    pub fn desk() -> Self {
        Self {
            iterations: 500,
            lr: 1e-3,
            lr_drop_iter: 350,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(RefineError::Config("lr and lr_drop_factor must be positive".into()));
        }
        if !(self.perceptual_weight >= 0.0) {
            return Err(RefineError::Config("perceptual_weight must be non-negative".into()));
        }
        if self.views_per_step == 0 {
            return Err(RefineError::Config("views_per_step must be positive".into()));
        }
        Ok(())
    }

    pub fn from_flat(cfg: &crate::config::FlatConfig) -> Result<Self> {
        let mut t = Self::desk();
        cfg.set("train.iterations", &mut t.iterations)?;
        cfg.set("train.lr", &mut t.lr)?;
        cfg.set("train.lr_drop_iter", &mut t.lr_drop_iter)?;
        cfg.set("train.lr_drop_factor", &mut t.lr_drop_factor)?;
        cfg.set("train.perceptual_weight", &mut t.perceptual_weight)?;
        cfg.set("train.views_per_step", &mut t.views_per_step)?;
        cfg.set("train.seed", &mut t.seed)?;
        t.validate()?;
        Ok(t)
    }
}

/// Learning rate in effect at (0-based) iteration `iter`.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter >= cfg.lr_drop_iter {
        cfg.lr / cfg.lr_drop_factor
    } else {
        cfg.lr
    }
}

/// A pruned cloud with its views and target images.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub targets: Vec<Image>,
    pub train_views: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub l1: f64,
    pub perc: f64,
    pub total: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:e} l1={:.8} perc={:.8} total={:.8}",
            self.iter, self.lr, self.l1, self.perc, self.total
        )
    }
}

/// Optimise `model.params` in place. Returns one record per iteration.
pub fn train(
    scenes: &[TrainScene],
    model: &mut Model,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if scenes.is_empty() {
        return Err(RefineError::NoData("no scenes".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.train_views.is_empty() || s.cloud.is_empty() {
            return Err(RefineError::NoData(format!("scene {i} has no training views or Gaussians")));
        }
        if s.cameras.len() != s.targets.len() {
            return Err(RefineError::NoData(format!("scene {i}: cameras and targets differ in count")));
        }
    }
    let prepared: Vec<Prepared<f32>> = scenes.iter().map(|s| Prepared::new(&s.cloud, &model.refiner)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let si = rng.random_range(0..scenes.len());
        let scene = &scenes[si];
        let views: Vec<usize> = if scene.train_views.len() >= cfg.views_per_step {
            scene.train_views.choose_multiple(&mut rng, cfg.views_per_step).copied().collect()
        } else {
            (0..cfg.views_per_step)
                .map(|_| scene.train_views[rng.random_range(0..scene.train_views.len())])
                .collect()
        };
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let fwd = forward_on_tape(&tape, &bound, &model.encoder, &model.refiner, &prepared[si])?;
        let mut total = None;
        let (mut l1, mut perc, mut tot) = (0.0, 0.0, 0.0);
        let inv = 1.0 / views.len() as f64;
        for &v in &views {
            let img = render_on_tape(&tape, &fwd.params, scene.cloud.sh_degree, &scene.cameras[v])?;
            let (l, parts) = image_loss_on_tape(img, &scene.targets[v], cfg.perceptual_weight)?;
            l1 += parts.l1 * inv;
            perc += parts.perc * inv;
            tot += parts.total * inv;
            let l = l.scale(inv);
            total = Some(match total {
                None => l,
                Some(t) => l.add(t)?,
            });
        }
        if !tot.is_finite() {
            return Err(RefineError::Diverged { iter, loss: tot });
        }
        let grads = tape.backward(total.expect("at least one view"))?;
        let g = bound.grads(&grads);
        if g.iter().any(|t| !t.is_finite()) {
            return Err(RefineError::Diverged { iter, loss: tot });
        }
        let lr = lr_at(cfg, iter);
        opt.update(&mut model.params, &g, lr);
        let rec = LogRecord {
            iter,
            lr,
            l1,
            perc,
            total: tot,
        };
        on_log(&rec);
        log.push(rec);
    }
    Ok(log)
}

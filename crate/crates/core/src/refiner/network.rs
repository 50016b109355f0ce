use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Level;
use super::{RefineError, Result};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{APPEARANCE_DIM, GEOMETRY_DIM};
use crate::nn::{Bound, ParamSet};
use crate::real::Real;

/// Blocks and downsample ratio of one stage. The first stage always runs at
/// full resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub blocks: usize,
    pub ratio: f64,
}

/// Per-group multipliers applied to the predicted deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualScales {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for ResidualScales {
    fn default() -> Self {
        Self {
            position: 0.01,
            rotation: 0.01,
            log_scale: 0.01,
            opacity: 0.1,
            sh: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub stages: Vec<Stage>,
    pub knn_k: usize,
    pub heads: usize,
    pub feature_width: usize,
    /// Hidden width of the delta MLPs.
    pub head_hidden: usize,
    pub residual_scales: ResidualScales,
    /// Zero the last layer of both delta MLPs so refinement starts at the
    /// identity.
    pub zero_init_deltas: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        let ratios = [1.0, 0.25, 0.25, 0.25, 0.25];
        Self {
            stages: [2, 2, 2, 4, 2]
                .iter()
                .zip(ratios)
                .map(|(&blocks, ratio)| Stage { blocks, ratio })
                .collect(),
            knn_k: 16,
            heads: 4,
            feature_width: 64,
            head_hidden: 64,
            residual_scales: ResidualScales::default(),
            zero_init_deltas: true,
        }
    }
}

impl RefinerConfig {
    /// Two stages of two blocks for CPU runs on a few hundred Gaussians.
    pub fn desk() -> Self {
        Self {
            stages: vec![Stage { blocks: 2, ratio: 1.0 }, Stage { blocks: 2, ratio: 0.25 }],
            feature_width: 32,
            head_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RefineError::Config(m));
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stages.iter().skip(1).any(|s| !(s.ratio > 0.0 && s.ratio <= 1.0)) {
            return bad("downsample ratios must be in (0, 1]".into());
        }
        if self.knn_k == 0 || self.heads == 0 || self.feature_width == 0 || self.head_hidden == 0 {
            return bad("knn_k, heads and widths must be positive".into());
        }
        if self.feature_width % self.heads != 0 {
            return bad(format!("feature_width {} not divisible by {} heads", self.feature_width, self.heads));
        }
        Ok(())
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.ratio).collect()
    }

    pub fn init_params<T: Real>(&self, seed: u64, p: &mut ParamSet<T>) -> Result<()> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.feature_width;
        p.add_linear("ref.stem", c, c, &mut rng);
        p.add_layer_norm("ref.stem_ln", c);
        for (s, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let pre = block_prefix(s, b);
                for m in ["q", "k", "v", "o"] {
                    p.add_linear(&format!("{pre}.{m}"), c, c, &mut rng);
                }
                p.add_layer_norm(&format!("{pre}.ln1"), c);
                p.add_linear(&format!("{pre}.ffn1"), c, 2 * c, &mut rng);
                p.add_linear(&format!("{pre}.ffn2"), 2 * c, c, &mut rng);
                p.add_layer_norm(&format!("{pre}.ln2"), c);
            }
        }
        p.add_linear("ref.head_p", c, c, &mut rng);
        p.add_linear("ref.head_a", c, c, &mut rng);
        let h = self.head_hidden;
        p.add_mlp("ref.delta_p", c, h, GEOMETRY_DIM, &mut rng);
        p.add_mlp("ref.delta_a", c, h, APPEARANCE_DIM, &mut rng);
        if self.zero_init_deltas {
            p.add_zero_linear("ref.delta_p.l2", h, GEOMETRY_DIM);
            p.add_zero_linear("ref.delta_a.l2", h, APPEARANCE_DIM);
        }
        Ok(())
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("ref.s{stage}.b{block}")
}

/// `[C, heads]` indicator of which channels belong to which head.
pub fn head_indicator<T: Real>(c: usize, heads: usize) -> Tensor<T> {
    let dh = c / heads;
    Tensor::from_fn(&[c, heads], |i| if (i / heads) / dh == i % heads { T::one() } else { T::zero() })
}

/// Multi-head attention over each row's neighbours, then a two-layer
/// feed-forward; post-norm residual around both.
pub fn attention_block<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    level: &Level,
    heads: usize,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (m, c) = (shape[0], shape[1]);
    let k = level.graph.k;
    let dh = c / heads;
    let q = bound.linear(&format!("{prefix}.q"), x)?;
    let kk = bound.linear(&format!("{prefix}.k"), x)?;
    let v = bound.linear(&format!("{prefix}.v"), x)?;
    let kn = kk.gather(level.graph_rc.clone())?;
    let vn = v.gather(level.graph_rc.clone())?;
    let qr = q.gather(level.repeat.clone())?;
    let ind = head_indicator::<T>(c, heads);
    let ind_t = Tensor::from_fn(&[heads, c], |i| ind.data()[(i % c) * heads + i / c]);
    let scores = qr
        .mul(kn)?
        .matmul(tape.constant(ind))?
        .scale(1.0 / (dh as f64).sqrt());
    let w = scores.reshape(&[m, k, heads])?.softmax(1)?.reshape(&[m * k, heads])?;
    let wc = w.matmul(tape.constant(ind_t))?;
    let attn = wc.mul(vn)?.scatter_add(level.repeat.clone(), m)?;
    let attn = bound.linear(&format!("{prefix}.o"), attn)?;
    let y = bound.layer_norm(&format!("{prefix}.ln1"), x.add(attn)?)?;
    let f = bound.linear(&format!("{prefix}.ffn1"), y)?.relu();
    let f = bound.linear(&format!("{prefix}.ffn2"), f)?;
    Ok(bound.layer_norm(&format!("{prefix}.ln2"), y.add(f)?)?)
}

/// Mean of fine rows per cluster.
fn pool_mean<'t, T: Real>(tape: &'t Tape<T>, x: Var<'t, T>, level: &Level) -> Result<Var<'t, T>> {
    let (pool, assign) = level.pool.as_ref().expect("coarse level has a pool");
    let c = x.shape()[1];
    let summed = x.scatter_add(assign.clone(), pool.clusters())?;
    let inv = Tensor::from_fn(&[pool.clusters(), c], |i| T::lit(1.0 / pool.counts[i / c] as f64));
    Ok(summed.mul(tape.constant(inv))?)
}

/// Shared trunk plus the geometry and appearance feature heads.
pub fn refine_features_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    cfg: &RefinerConfig,
    features: Var<'t, T>,
    levels: &[Level],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if levels.len() != cfg.stages.len() {
        return Err(RefineError::Config(format!("{} levels for {} stages", levels.len(), cfg.stages.len())));
    }
    let mut outs: Vec<Var<'t, T>> = Vec::with_capacity(levels.len());
    // The gated features sum to roughly 1/C per row; normalise before the
    // first block so their scale does not depend on the encoder variant.
    let mut x = bound.layer_norm("ref.stem_ln", bound.linear("ref.stem", features)?)?;
    for (s, (stage, level)) in cfg.stages.iter().zip(levels).enumerate() {
        if s > 0 {
            x = pool_mean(tape, x, level)?;
        }
        for b in 0..stage.blocks {
            x = attention_block(tape, bound, &block_prefix(s, b), x, level, cfg.heads)?;
        }
        outs.push(x);
    }
    for s in (1..levels.len()).rev() {
        let assign: Rc<Vec<usize>> = levels[s].pool.as_ref().unwrap().1.clone();
        outs[s - 1] = outs[s - 1].add(outs[s].gather(assign)?)?;
    }
    let trunk = outs[0];
    Ok((bound.linear("ref.head_p", trunk)?, bound.linear("ref.head_a", trunk)?))
}

/// Delta MLPs: `[N,10]` geometry deltas and `[N,49]` appearance deltas.
pub fn deltas_on_tape<'t, T: Real>(
    bound: &Bound<'t, T>,
    fp: Var<'t, T>,
    fa: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((bound.mlp("ref.delta_p", fp)?, bound.mlp("ref.delta_a", fa)?))
}

//! Dual-branch per-Gaussian feature encoder.
//!
//! Geometry input `f_p = [μ; q/‖q‖; exp(log_scale)]` (10 values). Appearance
//! input `a = [sigmoid(opacity_logit); γ]` where `γ` is the 48 SH coefficients
//! in coefficient-major order, zero-padded below degree 3. The SH block is
//! first reduced to `d_a` values by `φ`, giving `f_a = [α; φ(γ)]`.
//!
//! With `δ = ψ(μ)` the full model computes
//! `f = softmax(φ_a(f_a) + δ) ⊙ (φ_p(f_p) + δ)`, the softmax taken over the
//! `C` feature channels of each Gaussian. Every MLP is
//! `linear → layer_norm → relu → linear`.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::gaussians::{Gaussian, GaussianCloud};
use crate::nn::{Bound, ParamSet};
use crate::real::Real;

pub const GEOMETRY_DIM: usize = 10;
pub const SH_DIM: usize = 48;
pub const APPEARANCE_DIM: usize = 1 + SH_DIM;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Which parts of the encoder are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    /// `f = φ_p(f_p)`.
    Geometry,
    /// `f = φ_p(f_p) + δ`.
    GeometryPosition,
    /// `f = softmax(φ_a(f_a)) ⊙ φ_p(f_p)`.
    GatedNoPosition,
    /// The full gated model with `δ` on both branches.
    Full,
}

impl EncoderVariant {
    pub fn uses_position(self) -> bool {
        matches!(self, Self::GeometryPosition | Self::Full)
    }

    pub fn uses_appearance(self) -> bool {
        matches!(self, Self::GatedNoPosition | Self::Full)
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Geometry => "geometry",
            Self::GeometryPosition => "geometry_position",
            Self::GatedNoPosition => "gated_no_position",
            Self::Full => "full",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "geometry" | "II" => Self::Geometry,
            "geometry_position" | "III" => Self::GeometryPosition,
            "gated_no_position" | "IV" => Self::GatedNoPosition,
            "full" | "V" => Self::Full,
            _ => return Err(format!("unknown encoder variant `{s}`")),
        })
    }
}

/// Axis of the gating softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAxis {
    /// Over the `C` channels of each Gaussian (default).
    Channels,
    /// Over all Gaussians, per channel. Breaks permutation-local behaviour.
    Gaussians,
}

impl fmt::Display for GateAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Channels => "channels",
            Self::Gaussians => "gaussians",
        })
    }
}

impl FromStr for GateAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "channels" => Ok(Self::Channels),
            "gaussians" => Ok(Self::Gaussians),
            _ => Err(format!("unknown gate axis `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub feature_width: usize,
    pub sh_reduced_dim: usize,
    pub hidden: usize,
    pub variant: EncoderVariant,
    pub gate_axis: GateAxis,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            sh_reduced_dim: 16,
            hidden: 64,
            variant: EncoderVariant::Full,
            gate_axis: GateAxis::Channels,
        }
    }
}

impl EncoderConfig {
    /// Narrower widths for CPU runs on a few hundred Gaussians.
    pub fn desk() -> Self {
        Self {
            feature_width: 32,
            sh_reduced_dim: 16,
            hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.hidden == 0 || self.sh_reduced_dim == 0 {
            return Err(EncoderError::Config("widths must be positive".into()));
        }
        if self.sh_reduced_dim > SH_DIM {
            return Err(EncoderError::Config(format!("sh_reduced_dim {} exceeds {SH_DIM}", self.sh_reduced_dim)));
        }
        Ok(())
    }

    /// Parameter names `encode` will look up, in creation order.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h) = (self.feature_width, self.hidden);
        let mut p = ParamSet::new();
        p.add_mlp("enc.phi_p", GEOMETRY_DIM, h, c, &mut rng);
        if self.variant.uses_appearance() {
            p.add_mlp("enc.phi", SH_DIM, h, self.sh_reduced_dim, &mut rng);
            p.add_mlp("enc.phi_a", 1 + self.sh_reduced_dim, h, c, &mut rng);
        }
        if self.variant.uses_position() {
            p.add_mlp("enc.psi", 3, h, c, &mut rng);
        }
        Ok(p)
    }
}

/// `(f_p, a)` for one Gaussian.
pub fn branch_features(g: &Gaussian) -> ([f32; GEOMETRY_DIM], [f32; APPEARANCE_DIM]) {
    let q = g.unit_rotation().unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let s = g.scale();
    let mut fp = [0.0f32; GEOMETRY_DIM];
    fp[..3].copy_from_slice(&g.position);
    for k in 0..4 {
        fp[3 + k] = q[k] as f32;
        if k < 3 {
            fp[7 + k] = s[k] as f32;
        }
    }
    let mut a = [0.0f32; APPEARANCE_DIM];
    a[0] = g.opacity() as f32;
    a[1..].copy_from_slice(&g.sh_flat48());
    (fp, a)
}

/// Stacked branch inputs for a cloud: `[N,10]`, `[N,49]`, positions `[N,3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInputs<T> {
    pub geometry: Tensor<T>,
    pub appearance: Tensor<T>,
    pub positions: Tensor<T>,
}

impl<T: Real> EncoderInputs<T> {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let mut geo = Vec::with_capacity(n * GEOMETRY_DIM);
        let mut app = Vec::with_capacity(n * APPEARANCE_DIM);
        let mut pos = Vec::with_capacity(n * 3);
        for g in cloud.iter() {
            let (fp, a) = branch_features(g);
            geo.extend(fp.iter().map(|&v| T::lit(v as f64)));
            app.extend(a.iter().map(|&v| T::lit(v as f64)));
            pos.extend(g.position.iter().map(|&v| T::lit(v as f64)));
        }
        Self {
            geometry: Tensor::new(vec![n, GEOMETRY_DIM], geo).expect("geometry shape"),
            appearance: Tensor::new(vec![n, APPEARANCE_DIM], app).expect("appearance shape"),
            positions: Tensor::new(vec![n, 3], pos).expect("position shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.geometry.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles of the encoder outputs.
pub struct EncodedVars<'t, T> {
    pub features: Var<'t, T>,
    pub gate: Option<Var<'t, T>>,
    pub geometry: Var<'t, T>,
    pub appearance: Var<'t, T>,
}

fn check_params<T: Real>(bound: &Bound<'_, T>, cfg: &EncoderConfig) -> Result<()> {
    let mut need = vec!["enc.phi_p.l1.w"];
    if cfg.variant.uses_appearance() {
        need.extend(["enc.phi.l1.w", "enc.phi_a.l1.w"]);
    }
    if cfg.variant.uses_position() {
        need.push("enc.psi.l1.w");
    }
    for n in need {
        if !bound.has(n) {
            return Err(EncoderError::MissingParam(n.into()));
        }
    }
    Ok(())
}

/// Record the encoder on `tape`.
pub fn encode_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    cfg: &EncoderConfig,
    inputs: &EncoderInputs<T>,
) -> Result<EncodedVars<'t, T>> {
    check_params(bound, cfg)?;
    let geometry = tape.constant(inputs.geometry.clone());
    let appearance = tape.constant(inputs.appearance.clone());
    let mut geo = bound.mlp("enc.phi_p", geometry)?;
    let delta = if cfg.variant.uses_position() {
        Some(bound.mlp("enc.psi", tape.constant(inputs.positions.clone()))?)
    } else {
        None
    };
    if let Some(d) = delta {
        geo = geo.add(d)?;
    }
    if !cfg.variant.uses_appearance() {
        return Ok(EncodedVars {
            features: geo,
            gate: None,
            geometry,
            appearance,
        });
    }
    let alpha = appearance.slice_cols(0, 1)?;
    let reduced = bound.mlp("enc.phi", appearance.slice_cols(1, SH_DIM)?)?;
    let fa = tape.concat_cols(&[alpha, reduced])?;
    let mut logits = bound.mlp("enc.phi_a", fa)?;
    if let Some(d) = delta {
        logits = logits.add(d)?;
    }
    let axis = match cfg.gate_axis {
        GateAxis::Channels => 1,
        GateAxis::Gaussians => 0,
    };
    let gate = logits.softmax(axis)?;
    Ok(EncodedVars {
        features: gate.mul(geo)?,
        gate: Some(gate),
        geometry,
        appearance,
    })
}

/// Encoder outputs detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures<T> {
    /// `[N, C]` fused features.
    pub features: Tensor<T>,
    /// `[N, C]` gate, absent for variants without the appearance branch.
    pub gate: Option<Tensor<T>>,
    /// `[N, 10]` geometry inputs.
    pub geometry: Tensor<T>,
    /// `[N, 49]` appearance inputs.
    pub appearance: Tensor<T>,
}

pub fn encode<T: Real>(cloud: &GaussianCloud, cfg: &EncoderConfig, params: &ParamSet<T>) -> Result<EncodedFeatures<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let inputs = EncoderInputs::from_cloud(cloud);
    let out = encode_on_tape(&tape, &bound, cfg, &inputs)?;
    Ok(EncodedFeatures {
        features: (*out.features.value()).clone(),
        gate: out.gate.map(|g| (*g.value()).clone()),
        geometry: inputs.geometry,
        appearance: inputs.appearance,
    })
}

use super::network::ResidualScales;
use super::{RefineError, Result};
use crate::autodiff::{AutodiffError, BackwardFn, Tape, Tensor, Var};
use crate::gaussians::{coeffs_per_channel, GaussianCloud};
use crate::rasterizer::{rasterize_backward, rasterize_params, Camera, SplatParams};
use crate::real::Real;

/// Raw parameters of a cloud as row-major tensors:
/// positions `[N,3]`, rotations `[N,4]`, log-scales `[N,3]`, opacity logits
/// `[N,1]` and SH `[N,3K]` in coefficient-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors<T> {
    pub positions: Tensor<T>,
    pub rotations: Tensor<T>,
    pub log_scales: Tensor<T>,
    pub opacity: Tensor<T>,
    pub sh: Tensor<T>,
    pub sh_degree: usize,
}

impl<T: Real> ParamTensors<T> {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        Self::from_splat(&SplatParams::from_cloud(cloud))
    }

    pub fn from_splat(p: &SplatParams<T>) -> Self {
        let n = p.len();
        let t = |w: usize, v: &Vec<T>| Tensor::new(vec![n, w], v.clone()).expect("param shape");
        Self {
            positions: t(3, &p.positions),
            rotations: t(4, &p.rotations),
            log_scales: t(3, &p.log_scales),
            opacity: t(1, &p.opacity_logits),
            sh: t(p.sh_stride(), &p.sh),
            sh_degree: p.sh_degree,
        }
    }

    pub fn to_splat(&self) -> SplatParams<T> {
        SplatParams {
            positions: self.positions.data().to_vec(),
            rotations: self.rotations.data().to_vec(),
            log_scales: self.log_scales.data().to_vec(),
            opacity_logits: self.opacity.data().to_vec(),
            sh: self.sh.data().to_vec(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Tape handles of the five parameter groups.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars<'t, T> {
    pub positions: Var<'t, T>,
    pub rotations: Var<'t, T>,
    pub log_scales: Var<'t, T>,
    pub opacity: Var<'t, T>,
    pub sh: Var<'t, T>,
}

/// `base + scale·delta` per group. `dp` is `[N,10]` (μ, q, log-scale),
/// `da` is `[N,49]` (opacity logit, 48 SH values); SH columns beyond the
/// cloud's degree are ignored.
pub fn residual_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    base: &ParamTensors<T>,
    dp: Var<'t, T>,
    da: Var<'t, T>,
    scales: &ResidualScales,
) -> Result<ParamVars<'t, T>> {
    let add = |b: &Tensor<T>, d: Var<'t, T>, s: f64| -> std::result::Result<Var<'t, T>, AutodiffError> {
        tape.constant(b.clone()).add(d.scale(s))
    };
    let stride = base.sh.last_dim();
    Ok(ParamVars {
        positions: add(&base.positions, dp.slice_cols(0, 3)?, scales.position)?,
        rotations: add(&base.rotations, dp.slice_cols(3, 4)?, scales.rotation)?,
        log_scales: add(&base.log_scales, dp.slice_cols(7, 3)?, scales.log_scale)?,
        opacity: add(&base.opacity, da.slice_cols(0, 1)?, scales.opacity)?,
        sh: add(&base.sh, da.slice_cols(1, stride)?, scales.sh)?,
    })
}

/// Rasterize as a tape node; the output is `[H, W, 3]`.
pub fn render_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    p: &ParamVars<'t, T>,
    sh_degree: usize,
    cam: &Camera,
) -> Result<Var<'t, T>> {
    let cam = cam.clone();
    let inputs = [p.positions, p.rotations, p.log_scales, p.opacity, p.sh];
    let out = tape.custom(&inputs, move |v| {
        let params = SplatParams {
            positions: v[0].data().to_vec(),
            rotations: v[1].data().to_vec(),
            log_scales: v[2].data().to_vec(),
            opacity_logits: v[3].data().to_vec(),
            sh: v[4].data().to_vec(),
            sh_degree,
        };
        let img = rasterize_params(&params, &cam).map_err(|e| AutodiffError::Custom(e.to_string()))?;
        let out = Tensor::new(vec![cam.height, cam.width, 3], img.rgb)?;
        let n = params.len();
        let stride = params.sh_stride();
        let back: BackwardFn<T> = Box::new(move |g| {
            let gr = rasterize_backward(&params, &cam, g.data()).expect("validated in forward");
            let t = |w: usize, v: Vec<T>| Tensor::new(vec![n, w], v).expect("grad shape");
            vec![
                t(3, gr.positions),
                t(4, gr.rotations),
                t(3, gr.log_scales),
                t(1, gr.opacity_logits),
                t(stride, gr.sh),
            ]
        });
        Ok((out, back))
    })?;
    Ok(out)
}

/// Geometry and appearance deltas detached from a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Deltas {
    /// `[N,10]`.
    pub geometry: Tensor<f32>,
    /// `[N,49]`.
    pub appearance: Tensor<f32>,
}

impl Deltas {
    pub fn zeros(n: usize) -> Self {
        Self {
            geometry: Tensor::zeros(&[n, 10]),
            appearance: Tensor::zeros(&[n, 49]),
        }
    }
}

/// Add scaled deltas to the raw parameters of `cloud`. A rotation whose delta
/// is non-zero is renormalised; an untouched one is copied as is.
pub fn apply_residual(cloud: &GaussianCloud, deltas: &Deltas, scales: &ResidualScales) -> Result<GaussianCloud> {
    let n = cloud.len();
    if deltas.geometry.shape() != [n, 10] || deltas.appearance.shape() != [n, 49] {
        return Err(RefineError::Shape(format!(
            "deltas {:?}/{:?} for {n} Gaussians",
            deltas.geometry.shape(),
            deltas.appearance.shape()
        )));
    }
    let k = coeffs_per_channel(cloud.sh_degree);
    let (dg, da) = (deltas.geometry.data(), deltas.appearance.data());
    let s = |v: f64| v as f32;
    let mut out = cloud.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        let row = &dg[i * 10..(i + 1) * 10];
        for a in 0..3 {
            g.position[a] += s(scales.position) * row[a];
            g.log_scale[a] += s(scales.log_scale) * row[7 + a];
        }
        if row[3..7].iter().any(|&d| d != 0.0) {
            for a in 0..4 {
                g.rotation[a] += s(scales.rotation) * row[3 + a];
            }
            let norm = g.rotation.iter().map(|c| c * c).sum::<f32>().sqrt();
            if norm > 0.0 {
                g.rotation = g.rotation.map(|c| c / norm);
            } else {
                g.rotation = [1.0, 0.0, 0.0, 0.0];
            }
        }
        let arow = &da[i * 49..(i + 1) * 49];
        g.opacity_logit += s(scales.opacity) * arow[0];
        for kk in 0..k {
            for ch in 0..3 {
                *g.sh_mut(kk, ch).expect("in range") += s(scales.sh) * arow[1 + kk * 3 + ch];
            }
        }
    }
    Ok(out)
}

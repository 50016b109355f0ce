use rayon::prelude::*;

use super::{Camera, SplatParams, CULL_SIGMA, DILATION, MIN_ALPHA};
use crate::gaussians::{covariance_from_raw, Gaussian};
use crate::real::{sigmoid, Real};
use crate::shading::sh_basis_into;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
}

/// A projected, shaded splat ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat<T> {
    /// Index into the source cloud.
    pub index: usize,
    pub depth: T,
    pub mean: [T; 2],
    /// Dilated 2D covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub cov: [T; 3],
    /// Inverse of `cov`, same packing.
    pub conic: [T; 3],
    pub opacity: T,
    pub color: [T; 3],
    /// Pixel rectangle `[x0, x1) × [y0, y1)` outside which `α' < 1/255`.
    pub bbox: [usize; 4],
}

pub(crate) struct CameraT<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub r: [[T; 3]; 3],
    pub t: [T; 3],
    pub center: [T; 3],
    pub near: T,
    pub far: T,
}

impl<T: Real> CameraT<T> {
    pub fn new(cam: &Camera) -> Self {
        Self {
            fx: T::lit(cam.fx),
            fy: T::lit(cam.fy),
            cx: T::lit(cam.cx),
            cy: T::lit(cam.cy),
            r: cam.rotation.map(|row| row.map(T::lit)),
            t: cam.translation.map(T::lit),
            center: cam.center().map(T::lit),
            near: T::lit(cam.near),
            far: T::lit(cam.far),
        }
    }

    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }
}

/// Perspective Jacobian at camera-space point `p`, rows of `J` (2×3).
pub(crate) fn jacobian<T: Real>(cam: &CameraT<T>, p: [T; 3]) -> [[T; 3]; 2] {
    let z = p[2];
    let zz = z * z;
    [
        [cam.fx / z, T::zero(), -cam.fx * p[0] / zz],
        [T::zero(), cam.fy / z, -cam.fy * p[1] / zz],
    ]
}

/// `T = J W` (2×3) with `W` the camera rotation.
pub(crate) fn jw<T: Real>(j: &[[T; 3]; 2], w: &[[T; 3]; 3]) -> [[T; 3]; 2] {
    let mut out = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    out
}

/// `T Σ Tᵀ` packed as `(a, b, c)` without dilation.
pub(crate) fn project_cov<T: Real>(t: &[[T; 3]; 2], sigma: &[[T; 3]; 3]) -> [T; 3] {
    let mut ts = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = t[r][0] * sigma[0][c] + t[r][1] * sigma[1][c] + t[r][2] * sigma[2][c];
        }
    }
    let dot = |a: &[T; 3], b: &[T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    [dot(&ts[0], &t[0]), dot(&ts[0], &t[1]), dot(&ts[1], &t[1])]
}

pub(crate) fn gather3<T: Real>(v: &[T], i: usize) -> [T; 3] {
    [v[3 * i], v[3 * i + 1], v[3 * i + 2]]
}

pub(crate) fn gather4<T: Real>(v: &[T], i: usize) -> [T; 4] {
    [v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]]
}

/// Mean, dilated covariance and camera-space centre, or `None` when culled.
fn footprint<T: Real>(
    cam: &CameraT<T>,
    width: usize,
    height: usize,
    pos: [T; 3],
    rot: [T; 4],
    log_scale: [T; 3],
) -> Option<([T; 3], [T; 2], [T; 3])> {
    let p = cam.to_camera(pos);
    if !(p[2] > cam.near && p[2] < cam.far) {
        return None;
    }
    let sigma = covariance_from_raw(rot, log_scale)?;
    let j = jacobian(cam, p);
    let t = jw(&j, &cam.r);
    let mut cov = project_cov(&t, &sigma);
    cov[0] += T::lit(DILATION);
    cov[2] += T::lit(DILATION);
    let mean = [cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy];
    let (a, b, c) = (cov[0].as_f64(), cov[1].as_f64(), cov[2].as_f64());
    let mid = 0.5 * (a + c);
    let lmax = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let r = CULL_SIGMA * lmax.sqrt();
    let (mx, my) = (mean[0].as_f64(), mean[1].as_f64());
    if !r.is_finite()
        || mx + r < -0.5
        || mx - r > width as f64 - 0.5
        || my + r < -0.5
        || my - r > height as f64 - 0.5
    {
        return None;
    }
    Some((p, mean, cov))
}

/// Spec-level projection of a single Gaussian, in double precision.
pub fn project(g: &Gaussian, cam: &Camera) -> Option<Projection> {
    let cam_t = CameraT::<f64>::new(cam);
    let (p, mean, cov) = footprint(
        &cam_t,
        cam.width,
        cam.height,
        g.position.map(|c| c as f64),
        g.rotation.map(|c| c as f64),
        g.log_scale.map(|c| c as f64),
    )?;
    Some(Projection {
        mean2d: mean,
        cov2d: [[cov[0], cov[1]], [cov[1], cov[2]]],
        depth: p[2],
    })
}

pub(crate) fn conic_of<T: Real>(cov: [T; 3]) -> Option<[T; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > T::zero()) {
        return None;
    }
    let inv = T::one() / det;
    Some([cov[2] * inv, -cov[1] * inv, cov[0] * inv])
}

/// SH colour before the `+0.5` shift, plus the basis and unit view direction.
pub(crate) fn shade<T: Real>(
    params: &SplatParams<T>,
    cam: &CameraT<T>,
    i: usize,
    basis: &mut [T],
) -> ([T; 3], [T; 3], T) {
    let pos = gather3(&params.positions, i);
    let d = [pos[0] - cam.center[0], pos[1] - cam.center[1], pos[2] - cam.center[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let v = d.map(|c| c / len);
    sh_basis_into(v, params.sh_degree, basis);
    let stride = params.sh_stride();
    let coeffs = &params.sh[i * stride..(i + 1) * stride];
    let mut rgb = [T::zero(); 3];
    for (k, &y) in basis.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += coeffs[k * 3 + ch] * y;
        }
    }
    (rgb, v, len)
}

/// Project and shade splat `i`; `None` when culled.
pub fn project_splat<T: Real>(params: &SplatParams<T>, i: usize, cam: &Camera) -> Option<ProjectedSplat<T>> {
    project_splat_with(params, i, &CameraT::new(cam), cam.width, cam.height)
}

pub(crate) fn project_splat_with<T: Real>(
    params: &SplatParams<T>,
    i: usize,
    cam: &CameraT<T>,
    width: usize,
    height: usize,
) -> Option<ProjectedSplat<T>> {
    let (p, mean, cov) = footprint(
        cam,
        width,
        height,
        gather3(&params.positions, i),
        gather4(&params.rotations, i),
        gather3(&params.log_scales, i),
    )?;
    let conic = conic_of(cov)?;
    let opacity = sigmoid(params.opacity_logits[i]);
    let mut basis = [T::zero(); 16];
    let k = crate::gaussians::coeffs_per_channel(params.sh_degree);
    let (raw, _, _) = shade(params, cam, i, &mut basis[..k]);
    let color = raw.map(|c| (c + T::lit(0.5)).max(T::zero()).min(T::one()));
    let bbox = support_bbox(mean, cov, opacity, width, height);
    Some(ProjectedSplat {
        index: i,
        depth: p[2],
        mean,
        cov,
        conic,
        opacity,
        color,
        bbox,
    })
}

/// Pixel rectangle that contains every pixel where this splat can pass the
/// `1/255` threshold. Empty when the splat is too transparent to ever count.
fn support_bbox<T: Real>(mean: [T; 2], cov: [T; 3], opacity: T, width: usize, height: usize) -> [usize; 4] {
    let alpha = opacity.as_f64();
    if alpha * (1.0 + 1e-6) < MIN_ALPHA {
        return [0, 0, 0, 0];
    }
    let (a, b, c) = (cov[0].as_f64(), cov[1].as_f64(), cov[2].as_f64());
    let mid = 0.5 * (a + c);
    let lmax = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let reach = (2.0 * (255.0 * alpha).ln().max(0.0) * lmax * (1.0 + 1e-6)).sqrt() + 1.0;
    let (mx, my) = (mean[0].as_f64(), mean[1].as_f64());
    let lo = |m: f64| (m - reach).floor().max(0.0) as usize;
    let hi = |m: f64, n: usize| ((m + reach).ceil() + 1.0).clamp(0.0, n as f64) as usize;
    [lo(mx).min(width), hi(mx, width), lo(my).min(height), hi(my, height)]
}

/// Project every Gaussian and sort the survivors by `(depth, index)`.
pub fn project_splats<T: Real>(params: &SplatParams<T>, cam: &Camera) -> Vec<ProjectedSplat<T>> {
    let cam_t = CameraT::new(cam);
    let mut splats: Vec<ProjectedSplat<T>> = (0..params.len())
        .into_par_iter()
        .filter_map(|i| project_splat_with(params, i, &cam_t, cam.width, cam.height))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal).then(a.index.cmp(&b.index)));
    splats
}

//! Exact gradients of the compositing equation with respect to raw splat
//! parameters. The depth order found by the forward sort is held fixed.
//!
//! Per pixel the contribution list is recomputed, then walked back to front
//! with a running suffix sum `B_i = Σ_{j>i} c_j α_j T_j`, giving
//! `∂C/∂α_i = c_i T_i − B_i / (1 − α_i)`. Screen-space gradients are
//! accumulated per tile, reduced in tile order, and finally chained through
//! the projection, the SH shading and the quaternion/scale covariance.

use rayon::prelude::*;

use super::forward::{splat_alpha, tile_rect};
use super::project::{gather3, gather4, jacobian, jw, shade, CameraT};
use super::{bin_tiles, project_splats, Camera, ProjectedSplat, RasterError, Result, SplatParams};
use super::{MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE};
use crate::gaussians::{coeffs_per_channel, normalize_quat, quat_to_rotmat};
use crate::real::{sigmoid, Real};
use crate::shading::sh_basis_poly_grad_into;

/// Gradients laid out exactly like [`SplatParams`].
pub type SplatGrads<T> = SplatParams<T>;

// d_mean_x, d_mean_y, d_conic_a, d_conic_b, d_conic_c, d_opacity, d_rgb
type ScreenGrad<T> = [T; 9];

struct Contribution<T> {
    slot: usize,
    alpha: T,
    g: T,
    dx: T,
    dy: T,
    t: T,
    clamped: bool,
}

fn pixel_backward<T: Real>(
    splats: &[ProjectedSplat<T>],
    list: &[u32],
    px: usize,
    py: usize,
    up: [T; 3],
    acc: &mut [ScreenGrad<T>],
    scratch: &mut Vec<Contribution<T>>,
) {
    scratch.clear();
    let (fx, fy) = (T::lit(px as f64), T::lit(py as f64));
    let mut t = T::one();
    for (slot, &rank) in list.iter().enumerate() {
        let s = &splats[rank as usize];
        let (alpha, g, dx, dy) = splat_alpha(s, fx, fy);
        if alpha < T::lit(MIN_ALPHA) {
            continue;
        }
        scratch.push(Contribution {
            slot,
            alpha,
            g,
            dx,
            dy,
            t,
            clamped: s.opacity * g > T::lit(MAX_ALPHA),
        });
        t *= T::one() - alpha;
        if t < T::lit(MIN_TRANSMITTANCE) {
            break;
        }
    }

    let mut suffix = [T::zero(); 3];
    for c in scratch.iter().rev() {
        let s = &splats[list[c.slot] as usize];
        let w = c.alpha * c.t;
        let a = &mut acc[c.slot];
        let mut d_alpha = T::zero();
        for ch in 0..3 {
            a[6 + ch] += up[ch] * w;
            d_alpha += up[ch] * (s.color[ch] * c.t - suffix[ch] / (T::one() - c.alpha));
            suffix[ch] += s.color[ch] * w;
        }
        if c.clamped {
            continue;
        }
        a[5] += d_alpha * c.g;
        let d_power = d_alpha * s.opacity * c.g;
        let [ca, cb, cc] = s.conic;
        a[0] += d_power * (ca * c.dx + cb * c.dy);
        a[1] += d_power * (cc * c.dy + cb * c.dx);
        a[2] += d_power * (-T::lit(0.5) * c.dx * c.dx);
        a[3] += d_power * (-c.dx * c.dy);
        a[4] += d_power * (-T::lit(0.5) * c.dy * c.dy);
    }
}

/// Chain screen-space gradients of one splat back to its raw parameters.
/// Returns `(d_position, d_rotation, d_log_scale, d_opacity_logit, d_sh)`.
#[allow(clippy::type_complexity)]
fn chain_to_params<T: Real>(
    params: &SplatParams<T>,
    cam: &CameraT<T>,
    s: &ProjectedSplat<T>,
    gs: &ScreenGrad<T>,
) -> ([T; 3], [T; 4], [T; 3], T, Vec<T>) {
    let i = s.index;
    let zero = T::zero();
    let two = T::lit(2.0);
    let pos = gather3(&params.positions, i);
    let rot = gather4(&params.rotations, i);
    let ls = gather3(&params.log_scales, i);

    let op = sigmoid(params.opacity_logits[i]);
    let d_logit = gs[5] * op * (T::one() - op);

    // colour
    let k = coeffs_per_channel(params.sh_degree);
    let mut basis = [zero; 16];
    let (raw, v, len) = shade(params, cam, i, &mut basis[..k]);
    let mut d_raw = [zero; 3];
    for ch in 0..3 {
        let x = raw[ch] + T::lit(0.5);
        if x >= zero && x <= T::one() {
            d_raw[ch] = gs[6 + ch];
        }
    }
    let stride = params.sh_stride();
    let coeffs = &params.sh[i * stride..(i + 1) * stride];
    let mut d_sh = vec![zero; stride];
    let mut poly_grad = [[zero; 3]; 16];
    sh_basis_poly_grad_into(v, params.sh_degree, &mut poly_grad[..k]);
    let mut dv = [zero; 3];
    for kk in 0..k {
        let mut d_y = zero;
        for ch in 0..3 {
            d_sh[kk * 3 + ch] = d_raw[ch] * basis[kk];
            d_y += d_raw[ch] * coeffs[kk * 3 + ch];
        }
        for a in 0..3 {
            dv[a] += d_y * poly_grad[kk][a];
        }
    }
    let vdv = v[0] * dv[0] + v[1] * dv[1] + v[2] * dv[2];
    let mut d_pos = [0, 1, 2].map(|a| (dv[a] - v[a] * vdv) / len);

    // projection of the mean
    let p = cam.to_camera(pos);
    let (x, y, z) = (p[0], p[1], p[2]);
    let zz = z * z;
    let mut dp = [
        gs[0] * cam.fx / z,
        gs[1] * cam.fy / z,
        -(gs[0] * cam.fx * x + gs[1] * cam.fy * y) / zz,
    ];

    // conic -> 2D covariance
    let [a, b, c] = s.conic;
    let inv = [[a, b], [b, c]];
    let g_inv = [[gs[2], gs[3] / two], [gs[3] / two, gs[4]]];
    let mut tmp = [[zero; 2]; 2];
    for r in 0..2 {
        for cc in 0..2 {
            tmp[r][cc] = inv[r][0] * g_inv[0][cc] + inv[r][1] * g_inv[1][cc];
        }
    }
    let mut g_m = [[zero; 2]; 2];
    for r in 0..2 {
        for cc in 0..2 {
            g_m[r][cc] = -(tmp[r][0] * inv[0][cc] + tmp[r][1] * inv[1][cc]);
        }
    }

    // 2D covariance -> Σ and J
    let q = normalize_quat(rot).expect("projected splats have nonzero quaternions");
    let rmat = quat_to_rotmat(q);
    let sc = ls.map(|l| l.exp());
    let mut m = [[zero; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            m[r][cc] = rmat[r][cc] * sc[cc];
        }
    }
    let mut sigma = [[zero; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            sigma[r][cc] = m[r][0] * m[cc][0] + m[r][1] * m[cc][1] + m[r][2] * m[cc][2];
        }
    }
    let j = jacobian(cam, p);
    let tm = jw(&j, &cam.r);
    // dΣ = Tᵀ G T
    let mut gt = [[zero; 3]; 2];
    for r in 0..2 {
        for cc in 0..3 {
            gt[r][cc] = g_m[r][0] * tm[0][cc] + g_m[r][1] * tm[1][cc];
        }
    }
    let mut d_sigma = [[zero; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            d_sigma[r][cc] = tm[0][r] * gt[0][cc] + tm[1][r] * gt[1][cc];
        }
    }
    // dT = 2 G T Σ
    let mut d_t = [[zero; 3]; 2];
    for r in 0..2 {
        for cc in 0..3 {
            let mut acc = zero;
            for kk in 0..3 {
                acc += gt[r][kk] * sigma[kk][cc];
            }
            d_t[r][cc] = two * acc;
        }
    }
    // dJ = dT Wᵀ
    let w = &cam.r;
    let mut d_j = [[zero; 3]; 2];
    for r in 0..2 {
        for cc in 0..3 {
            d_j[r][cc] = d_t[r][0] * w[cc][0] + d_t[r][1] * w[cc][1] + d_t[r][2] * w[cc][2];
        }
    }
    let zzz = zz * z;
    dp[0] += d_j[0][2] * (-cam.fx / zz);
    dp[1] += d_j[1][2] * (-cam.fy / zz);
    dp[2] += d_j[0][0] * (-cam.fx / zz)
        + d_j[0][2] * (two * cam.fx * x / zzz)
        + d_j[1][1] * (-cam.fy / zz)
        + d_j[1][2] * (two * cam.fy * y / zzz);
    for a in 0..3 {
        d_pos[a] += w[0][a] * dp[0] + w[1][a] * dp[1] + w[2][a] * dp[2];
    }

    // Σ = M Mᵀ, M = R S
    let mut d_m = [[zero; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            d_m[r][cc] = two * (d_sigma[r][0] * m[0][cc] + d_sigma[r][1] * m[1][cc] + d_sigma[r][2] * m[2][cc]);
        }
    }
    let mut d_r = [[zero; 3]; 3];
    let mut d_ls = [zero; 3];
    for cc in 0..3 {
        let mut ds = zero;
        for r in 0..3 {
            d_r[r][cc] = d_m[r][cc] * sc[cc];
            ds += d_m[r][cc] * rmat[r][cc];
        }
        d_ls[cc] = ds * sc[cc];
    }
    let [qw, qx, qy, qz] = q;
    let four = T::lit(4.0);
    let dq_hat = [
        two * (-qz * d_r[0][1] + qy * d_r[0][2] + qz * d_r[1][0] - qx * d_r[1][2] - qy * d_r[2][0] + qx * d_r[2][1]),
        two * (qy * d_r[0][1] + qz * d_r[0][2] + qy * d_r[1][0] - qw * d_r[1][2] + qz * d_r[2][0] + qw * d_r[2][1])
            - four * qx * (d_r[1][1] + d_r[2][2]),
        two * (qx * d_r[0][1] + qw * d_r[0][2] + qx * d_r[1][0] + qz * d_r[1][2] - qw * d_r[2][0] + qz * d_r[2][1])
            - four * qy * (d_r[0][0] + d_r[2][2]),
        two * (-qw * d_r[0][1] + qx * d_r[0][2] + qw * d_r[1][0] + qy * d_r[1][2] + qx * d_r[2][0] + qy * d_r[2][1])
            - four * qz * (d_r[0][0] + d_r[1][1]),
    ];
    let norm = (rot[0] * rot[0] + rot[1] * rot[1] + rot[2] * rot[2] + rot[3] * rot[3]).sqrt();
    let qdq = q[0] * dq_hat[0] + q[1] * dq_hat[1] + q[2] * dq_hat[2] + q[3] * dq_hat[3];
    let d_rot = [0, 1, 2, 3].map(|a| (dq_hat[a] - q[a] * qdq) / norm);

    (d_pos, d_rot, d_ls, d_logit, d_sh)
}

/// Gradient of `Σ_pixels upstream · rgb` with respect to every raw parameter.
/// `upstream` is row-major `H×W×3`.
pub fn rasterize_backward<T: Real>(params: &SplatParams<T>, cam: &Camera, upstream: &[T]) -> Result<SplatGrads<T>> {
    cam.validate()?;
    params.validate()?;
    let (w, h) = (cam.width, cam.height);
    if upstream.len() != w * h * 3 {
        return Err(RasterError::Upstream {
            expected: w * h * 3,
            got: upstream.len(),
        });
    }
    let cam_t = CameraT::new(cam);
    let splats = project_splats(params, cam);
    let tiles = bin_tiles(&splats, w, h);

    let per_tile: Vec<Vec<ScreenGrad<T>>> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![[T::zero(); 9]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let mut scratch = Vec::new();
            let (x0, x1, y0, y1) = tile_rect(tile, w, h);
            for py in y0..y1 {
                for px in x0..x1 {
                    let o = 3 * (py * w + px);
                    let up = [upstream[o], upstream[o + 1], upstream[o + 2]];
                    if up.iter().all(|&u| u == T::zero()) {
                        continue;
                    }
                    pixel_backward(&splats, list, px, py, up, &mut acc, &mut scratch);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![[T::zero(); 9]; splats.len()];
    for (list, acc) in tiles.iter().zip(&per_tile) {
        for (&rank, g) in list.iter().zip(acc) {
            let dst = &mut screen[rank as usize];
            for k in 0..9 {
                dst[k] += g[k];
            }
        }
    }

    let chained: Vec<_> = splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| chain_to_params(params, &cam_t, s, g))
        .collect();

    let mut grads = SplatGrads::zeros(params.len(), params.sh_degree);
    let stride = params.sh_stride();
    for (s, (dp, dr, dl, dop, dsh)) in splats.iter().zip(chained) {
        let i = s.index;
        grads.positions[3 * i..3 * i + 3].copy_from_slice(&dp);
        grads.rotations[4 * i..4 * i + 4].copy_from_slice(&dr);
        grads.log_scales[3 * i..3 * i + 3].copy_from_slice(&dl);
        grads.opacity_logits[i] = dop;
        grads.sh[i * stride..(i + 1) * stride].copy_from_slice(&dsh);
    }
    Ok(grads)
}

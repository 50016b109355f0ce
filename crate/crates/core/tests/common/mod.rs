//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatrefine::gaussians::{Gaussian, GaussianCloud};
use splatrefine::rasterizer::{
    project_splats, splat_alpha, Camera, ProjectedSplat, RenderOutput, SplatParams, MIN_ALPHA, MIN_TRANSMITTANCE,
};
use splatrefine::Real;

pub mod dense;
pub mod ops;
pub mod pipeline;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Evaluate every projected splat at every pixel, no tiling.
pub fn naive_rasterize<T: Real>(params: &SplatParams<T>, cam: &Camera) -> RenderOutput<T> {
    let splats = project_splats(params, cam);
    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![T::zero(); w * h * 3];
    let mut alpha = vec![T::zero(); w * h];
    let mut overdraw = vec![0u32; w * h];
    for py in 0..h {
        for px in 0..w {
            let mut t = T::one();
            let mut c = [T::zero(); 3];
            let mut n = 0;
            for s in &splats {
                let (a, _, _, _) = splat_alpha(s, T::lit(px as f64), T::lit(py as f64));
                if a < T::lit(MIN_ALPHA) {
                    continue;
                }
                let wgt = a * t;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * wgt;
                }
                t *= T::one() - a;
                n += 1;
                if t < T::lit(MIN_TRANSMITTANCE) {
                    break;
                }
            }
            let o = py * w + px;
            rgb[3 * o..3 * o + 3].copy_from_slice(&c);
            alpha[o] = T::one() - t;
            overdraw[o] = n;
        }
    }
    RenderOutput {
        width: w,
        height: h,
        rgb,
        overdraw,
        alpha,
    }
}

/// Camera on the -z side of the origin looking at it, slightly rotated.
pub fn test_camera(rng: &mut impl Rng, w: usize, h: usize) -> Camera {
    let theta: f64 = rng.random_range(-0.6..0.6);
    let phi: f64 = rng.random_range(-0.4..0.4);
    let dist = rng.random_range(3.0..4.0);
    let eye = [dist * theta.sin() * phi.cos(), dist * phi.sin(), -dist * theta.cos() * phi.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 1.1 * w as f64, w, h).unwrap()
}

/// Random Gaussians near the origin with moderate opacity and in-gamut colour.
pub fn random_cloud(rng: &mut impl Rng, n: usize, degree: usize) -> GaussianCloud {
    let gs = (0..n)
        .map(|_| {
            let mut g = Gaussian::new(
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ],
                [
                    rng.random_range(-2.6..-1.4),
                    rng.random_range(-2.6..-1.4),
                    rng.random_range(-2.6..-1.4),
                ],
                rng.random_range(-1.5..1.5),
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ],
                degree,
            );
            for c in g.sh_coeffs.iter_mut().skip(3) {
                *c = rng.random_range(-0.15..0.15);
            }
            g.rotation = [
                rng.random_range(0.3..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            g
        })
        .collect();
    GaussianCloud::new(gs, degree).unwrap()
}

/// Discrete state of the compositing: per pixel the ordered list of
/// contributing splats with their clamp flags, plus colour clamp flags.
/// Finite differences are only valid where this does not change.
pub fn signature<T: Real>(params: &SplatParams<T>, cam: &Camera) -> Vec<u64> {
    let splats: Vec<ProjectedSplat<T>> = project_splats(params, cam);
    let mut sig = Vec::new();
    for s in &splats {
        sig.push(s.index as u64);
        for ch in 0..3 {
            let c = s.color[ch];
            sig.push(u64::from(c <= T::zero()) + 2 * u64::from(c >= T::one()));
        }
    }
    sig.push(u64::MAX);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut t = T::one();
            for s in &splats {
                let (a, g, _, _) = splat_alpha(s, T::lit(px as f64), T::lit(py as f64));
                if a < T::lit(MIN_ALPHA) {
                    continue;
                }
                let clamped = s.opacity * g > T::lit(0.99);
                sig.push(((s.index as u64) << 1) | u64::from(clamped));
                t *= T::one() - a;
                if t < T::lit(MIN_TRANSMITTANCE) {
                    break;
                }
            }
            sig.push(u64::MAX - 1);
        }
    }
    sig
}

/// Whether any splat sits within `margin` (relative) of a threshold in the
/// current configuration: skip, clamp, or termination.
pub fn near_boundary(params: &SplatParams<f64>, cam: &Camera, margin: f64) -> bool {
    let splats = project_splats(params, cam);
    for s in &splats {
        for ch in 0..3 {
            let c = s.color[ch];
            if c.abs() < margin || (c - 1.0).abs() < margin {
                return true;
            }
        }
    }
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut t = 1.0;
            for s in &splats {
                let (a, g, _, _) = splat_alpha(s, px as f64, py as f64);
                let raw = s.opacity * g;
                if (raw - MIN_ALPHA).abs() < margin * MIN_ALPHA || (raw - 0.99).abs() < margin {
                    return true;
                }
                if a < MIN_ALPHA {
                    continue;
                }
                t *= 1.0 - a;
                if (t - MIN_TRANSMITTANCE).abs() < margin * MIN_TRANSMITTANCE {
                    return true;
                }
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
        }
    }
    false
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Every raw parameter of `p` as `(group, index)` with a mutable accessor.
pub fn param_slots(p: &SplatParams<f64>) -> Vec<(&'static str, usize)> {
    let mut out = Vec::new();
    out.extend((0..p.positions.len()).map(|i| ("positions", i)));
    out.extend((0..p.rotations.len()).map(|i| ("rotations", i)));
    out.extend((0..p.log_scales.len()).map(|i| ("log_scales", i)));
    out.extend((0..p.opacity_logits.len()).map(|i| ("opacity_logits", i)));
    out.extend((0..p.sh.len()).map(|i| ("sh", i)));
    out
}

pub fn slot_mut<'a, T>(p: &'a mut SplatParams<T>, group: &str, i: usize) -> &'a mut T {
    match group {
        "positions" => &mut p.positions[i],
        "rotations" => &mut p.rotations[i],
        "log_scales" => &mut p.log_scales[i],
        "opacity_logits" => &mut p.opacity_logits[i],
        "sh" => &mut p.sh[i],
        _ => unreachable!(),
    }
}

pub fn slot<T: Copy>(p: &SplatParams<T>, group: &str, i: usize) -> T {
    match group {
        "positions" => p.positions[i],
        "rotations" => p.rotations[i],
        "log_scales" => p.log_scales[i],
        "opacity_logits" => p.opacity_logits[i],
        "sh" => p.sh[i],
        _ => unreachable!(),
    }
}

/// Outcome of a rasterizer gradient check on one scene.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Compare `rasterize_backward` with central differences of `Σ up·rgb`.
pub fn check_raster_gradients<T: Real>(
    params: &SplatParams<T>,
    cam: &Camera,
    upstream: &[T],
    eps: f64,
    tol: f64,
    floor: f64,
) -> GradCheck {
    use splatrefine::rasterizer::{rasterize_backward, rasterize_params};
    let loss = |p: &SplatParams<T>| -> f64 {
        let out = rasterize_params(p, cam).unwrap();
        out.rgb.iter().zip(upstream).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    };
    let grads = rasterize_backward(params, cam, upstream).unwrap();
    let base_sig = signature(params, cam);
    let as64 = params.cast::<f64>();
    let mut res = GradCheck::default();
    for (group, i) in param_slots(&as64) {
        let mut plus = params.clone();
        let mut minus = params.clone();
        let x = slot(params, group, i);
        *slot_mut(&mut plus, group, i) = x + T::lit(eps);
        *slot_mut(&mut minus, group, i) = x - T::lit(eps);
        if signature(&plus, cam) != base_sig || signature(&minus, cam) != base_sig {
            res.skipped += 1;
            continue;
        }
        let fd = (loss(&plus) - loss(&minus)) / ((x + T::lit(eps)).as_f64() - (x - T::lit(eps)).as_f64());
        let an = slot(&grads, group, i).as_f64();
        let e = rel_err(an, fd, floor);
        res.checked += 1;
        res.worst = res.worst.max(e);
        if e > tol {
            res.failures.push(format!("{group}[{i}]: analytic {an:.9e} fd {fd:.9e} rel {e:.3e}"));
        }
    }
    res
}

/// Cloud for pruning checks: random values with duplicated rows and shared
/// opacities or scales so that score ties occur.
pub fn tie_heavy_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    let mut gs: Vec<Gaussian> = Vec::with_capacity(n);
    for i in 0..n {
        let roll = rng.random_range(0..10);
        let g = if i > 0 && roll == 0 {
            gs[rng.random_range(0..i)].clone()
        } else {
            let mut g = Gaussian::new(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [rng.random_range(-4.0..0.0), rng.random_range(-4.0..0.0), rng.random_range(-4.0..0.0)],
                rng.random_range(-4.0..4.0),
                [0.0; 3],
                0,
            );
            if i > 0 && roll == 1 {
                g.opacity_logit = gs[rng.random_range(0..i)].opacity_logit;
            }
            if i > 0 && roll == 2 {
                g.log_scale = gs[rng.random_range(0..i)].log_scale;
            }
            g
        };
        gs.push(g);
    }
    GaussianCloud::new(gs, 0).unwrap()
}

/// Pruning score recomputed with plain loops: activated opacity and raw
/// ellipsoid volume, population z-scores, zero for constant inputs.
pub fn oracle_scores(cloud: &GaussianCloud, lambda: f64) -> Vec<f64> {
    let alpha: Vec<f64> = cloud.iter().map(|g| 1.0 / (1.0 + (-(g.opacity_logit as f64)).exp())).collect();
    let vol: Vec<f64> = cloud
        .iter()
        .map(|g| {
            let s: f64 = g.log_scale.iter().map(|&l| (l as f64).exp()).product();
            4.0 * std::f64::consts::PI / 3.0 * s
        })
        .collect();
    let z = |v: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let mut m = 0.0;
        for x in v {
            m += x;
        }
        m /= n;
        let mut var = 0.0;
        for x in v {
            var += (x - m) * (x - m);
        }
        let sd = (var / n).sqrt();
        v.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
    };
    let (za, zv) = (z(&alpha), z(&vol));
    za.iter().zip(&zv).map(|(a, v)| lambda * a + (1.0 - lambda) * v).collect()
}

/// Stable descending sort of the indices, first `k`, back in index order.
pub fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut top = idx[..k].to_vec();
    top.sort();
    top
}

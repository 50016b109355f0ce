use rayon::prelude::*;

use super::{
    project_splats, Camera, ProjectedSplat, RenderOutput, Result, SplatParams, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE,
    TILE_SIZE,
};
use crate::gaussians::GaussianCloud;
use crate::real::Real;

/// Splat opacity at pixel `(px, py)`: returns `(α', G, dx, dy)` where
/// `G = exp(-½ dᵀ Σ⁻¹ d)` and `d = pixel − mean`.
#[inline]
pub fn splat_alpha<T: Real>(s: &ProjectedSplat<T>, px: T, py: T) -> (T, T, T, T) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -T::lit(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    let g = power.exp();
    let alpha = (s.opacity * g).min(T::lit(MAX_ALPHA));
    (alpha, g, dx, dy)
}

/// Per-tile lists of indices into the depth-sorted splat array, each list in
/// ascending depth order. Tiles are row-major.
pub fn bin_tiles<T: Real>(splats: &[ProjectedSplat<T>], width: usize, height: usize) -> Vec<Vec<u32>> {
    let tx = width.div_ceil(TILE_SIZE);
    let ty = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (rank, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for ty_i in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx_i in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                tiles[ty_i * tx + tx_i].push(rank as u32);
            }
        }
    }
    tiles
}

pub(crate) struct PixelResult<T> {
    pub rgb: [T; 3],
    pub transmittance: T,
    pub count: u32,
}

/// Front-to-back compositing of `list` (ranks into `splats`) at one pixel.
#[inline]
pub(crate) fn composite_pixel<T: Real>(splats: &[ProjectedSplat<T>], list: &[u32], px: usize, py: usize) -> PixelResult<T> {
    let (fx, fy) = (T::lit(px as f64), T::lit(py as f64));
    let mut t = T::one();
    let mut rgb = [T::zero(); 3];
    let mut count = 0;
    for &rank in list {
        let s = &splats[rank as usize];
        let (alpha, _, _, _) = splat_alpha(s, fx, fy);
        if alpha < T::lit(MIN_ALPHA) {
            continue;
        }
        let w = alpha * t;
        for ch in 0..3 {
            rgb[ch] += s.color[ch] * w;
        }
        t *= T::one() - alpha;
        count += 1;
        if t < T::lit(MIN_TRANSMITTANCE) {
            break;
        }
    }
    PixelResult {
        rgb,
        transmittance: t,
        count,
    }
}

pub(crate) fn tile_rect(tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = width.div_ceil(TILE_SIZE);
    let (ti, tj) = (tile % tx, tile / tx);
    let x0 = ti * TILE_SIZE;
    let y0 = tj * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
}

/// Render raw splat parameters. Background is black.
pub fn rasterize_params<T: Real>(params: &SplatParams<T>, cam: &Camera) -> Result<RenderOutput<T>> {
    cam.validate()?;
    params.validate()?;
    let (w, h) = (cam.width, cam.height);
    let splats = project_splats(params, cam);
    let tiles = bin_tiles(&splats, w, h);
    let per_tile: Vec<Vec<PixelResult<T>>> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (x0, x1, y0, y1) = tile_rect(tile, w, h);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    out.push(composite_pixel(&splats, list, px, py));
                }
            }
            out
        })
        .collect();

    let mut rgb = vec![T::zero(); w * h * 3];
    let mut alpha = vec![T::zero(); w * h];
    let mut overdraw = vec![0u32; w * h];
    for (tile, pixels) in per_tile.into_iter().enumerate() {
        let (x0, x1, y0, _) = tile_rect(tile, w, h);
        let tw = x1 - x0;
        for (k, p) in pixels.into_iter().enumerate() {
            let (px, py) = (x0 + k % tw, y0 + k / tw);
            let o = py * w + px;
            rgb[3 * o..3 * o + 3].copy_from_slice(&p.rgb);
            alpha[o] = T::one() - p.transmittance;
            overdraw[o] = p.count;
        }
    }
    Ok(RenderOutput {
        width: w,
        height: h,
        rgb,
        overdraw,
        alpha,
    })
}

/// Render a cloud in single precision.
pub fn rasterize(cloud: &GaussianCloud, cam: &Camera) -> Result<RenderOutput<f32>> {
    rasterize_params(&SplatParams::<f32>::from_cloud(cloud), cam)
}

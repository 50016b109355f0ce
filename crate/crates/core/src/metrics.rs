//! PSNR, SSIM and opacity/volume distribution statistics.

use std::fmt::Write as _;

use thiserror::Error;

use crate::gaussians::GaussianCloud;
use crate::image_io::{Image, ImageError};
use crate::pruner::{log10_volume, median};

/// Reported PSNR when the images are identical.
pub const PSNR_IDENTICAL_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const HIST_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {0}x{1} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("index {0} out of range for {1} Gaussians")]
    Index(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10·log10(1/MSE)` for images in `[0,1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(-10.0 * m.log10())
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Valid-mode separable correlation of a `w×h` plane with the window.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + SSIM_WINDOW];
            tmp[y * ow + x] = row.iter().zip(taps).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| tmp[(y + k) * ow + x] * taps[k]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-mode map back to full size.
fn filter_adjoint(g: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * ow + x] += v * taps[k];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += v * taps[k];
            }
        }
    }
    out
}

struct SsimMaps {
    x: Vec<f64>,
    y: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
    s: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_maps(x: Vec<f64>, y: Vec<f64>, w: usize, h: usize) -> Result<SsimMaps> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    if x.len() != w * h || y.len() != w * h {
        return Err(MetricError::Image(ImageError::Length { got: x.len().min(y.len()), want: w * h }));
    }
    let taps = ssim_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &taps);
    let my = filter_valid(&y, w, h, &taps);
    let exx = filter_valid(&prod(&x, &x), w, h, &taps);
    let eyy = filter_valid(&prod(&y, &y), w, h, &taps);
    let exy = filter_valid(&prod(&x, &y), w, h, &taps);
    let n = mx.len();
    let (mut s, mut a1, mut a2, mut b1, mut b2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (u, v) = (mx[i], my[i]);
        a1[i] = 2.0 * u * v + SSIM_C1;
        a2[i] = 2.0 * (exy[i] - u * v) + SSIM_C2;
        b1[i] = u * u + v * v + SSIM_C1;
        b2[i] = (exx[i] - u * u) + (eyy[i] - v * v) + SSIM_C2;
        s[i] = a1[i] * a2[i] / (b1[i] * b2[i]);
    }
    Ok(SsimMaps {
        x,
        y,
        mx,
        my,
        s,
        a1,
        a2,
        b1,
        b2,
    })
}

/// Mean SSIM over all valid windows of the channel-mean images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let m = ssim_maps(a.gray(), b.gray(), a.width, a.height)?;
    Ok(m.s.iter().sum::<f64>() / m.s.len() as f64)
}

/// SSIM of two `w×h` gray planes and its gradient with respect to `x`.
pub fn ssim_gray_with_grad(x: Vec<f64>, y: Vec<f64>, w: usize, h: usize) -> Result<(f64, Vec<f64>)> {
    let m = ssim_maps(x, y, w, h)?;
    let n = m.s.len();
    let inv_n = 1.0 / n as f64;
    let (mut gm, mut gxx, mut gxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (u, v, s) = (m.mx[i], m.my[i], m.s[i]);
        let den = m.b1[i] * m.b2[i];
        let d_num = 2.0 * v * m.a2[i] - 2.0 * v * m.a1[i];
        gm[i] = inv_n * (d_num / den - s * (2.0 * u / m.b1[i] - 2.0 * u / m.b2[i]));
        gxx[i] = inv_n * (-s / m.b2[i]);
        gxy[i] = inv_n * (2.0 * m.a1[i] / den);
    }
    let taps = ssim_taps();
    let fm = filter_adjoint(&gm, w, h, &taps);
    let fxx = filter_adjoint(&gxx, w, h, &taps);
    let fxy = filter_adjoint(&gxy, w, h, &taps);
    let grad = (0..w * h).map(|p| fm[p] + 2.0 * m.x[p] * fxx[p] + m.y[p] * fxy[p]).collect();
    Ok((m.s.iter().sum::<f64>() * inv_n, grad))
}

/// SSIM together with its gradient with respect to every RGB value of `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    a.check_same_shape(b)?;
    let (s, g) = ssim_gray_with_grad(a.gray(), b.gray(), a.width, a.height)?;
    Ok((s, g.iter().flat_map(|&v| [v / 3.0; 3]).collect()))
}

/// Per-view and mean image quality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub views: Vec<(String, f64, f64)>,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>) -> Result<Self> {
        let mut views = Vec::new();
        for (name, a, b) in pairs {
            views.push((name, psnr(a, b)?, ssim(a, b)?));
        }
        let n = views.len().max(1) as f64;
        let psnr = views.iter().map(|v| v.1).sum::<f64>() / n;
        let ssim = views.iter().map(|v| v.2).sum::<f64>() / n;
        Ok(Self { views, psnr, ssim })
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "views={}", self.views.len()).unwrap();
        writeln!(s, "psnr={:.6}", self.psnr).unwrap();
        writeln!(s, "ssim={:.6}", self.ssim).unwrap();
        for (name, p, q) in &self.views {
            writeln!(s, "view.{name}={p:.6},{q:.6}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for (name, p, q) in &self.views {
            writeln!(s, "{name},{p:.6},{q:.6}").unwrap();
        }
        writeln!(s, "mean,{:.6},{:.6}", self.psnr, self.ssim).unwrap();
        s
    }
}

/// Fixed-width histogram over `[lo, hi]`; the top edge is inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }
}

/// Opacity and log10-volume histograms and medians for a selection.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    pub opacity_selected: Histogram,
    pub opacity_rejected: Histogram,
    pub log_volume_selected: Histogram,
    pub log_volume_rejected: Histogram,
    pub median_opacity_selected: f64,
    pub median_opacity_rejected: f64,
    pub median_log_volume_selected: f64,
    pub median_log_volume_rejected: f64,
}

pub fn distribution_stats(cloud: &GaussianCloud, selected: &[usize]) -> Result<DistributionStats> {
    let n = cloud.len();
    let mut mask = vec![false; n];
    for &i in selected {
        if i >= n {
            return Err(MetricError::Index(i, n));
        }
        mask[i] = true;
    }
    let op: Vec<f64> = cloud.iter().map(|g| g.opacity()).collect();
    let lv: Vec<f64> = cloud.iter().map(log10_volume).collect();
    let (mut lo, mut hi) = lv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let pick = |v: &[f64], want: bool| -> Vec<f64> { v.iter().zip(&mask).filter(|(_, &m)| m == want).map(|(&x, _)| x).collect() };
    let (os, or) = (pick(&op, true), pick(&op, false));
    let (ls, lr) = (pick(&lv, true), pick(&lv, false));
    Ok(DistributionStats {
        median_opacity_selected: median(&os),
        median_opacity_rejected: median(&or),
        median_log_volume_selected: median(&ls),
        median_log_volume_rejected: median(&lr),
        opacity_selected: Histogram::new(0.0, 1.0, HIST_BINS, os),
        opacity_rejected: Histogram::new(0.0, 1.0, HIST_BINS, or),
        log_volume_selected: Histogram::new(lo, hi, HIST_BINS, ls),
        log_volume_rejected: Histogram::new(lo, hi, HIST_BINS, lr),
    })
}

impl DistributionStats {
    /// One row per bin: `quantity,bin_lo,bin_hi,selected,rejected`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,bin_lo,bin_hi,selected,rejected\n");
        for (name, sel, rej) in [
            ("opacity", &self.opacity_selected, &self.opacity_rejected),
            ("log10_volume", &self.log_volume_selected, &self.log_volume_rejected),
        ] {
            for i in 0..sel.counts.len() {
                writeln!(
                    s,
                    "{name},{:.6},{:.6},{},{}",
                    sel.edge(i),
                    sel.edge(i + 1),
                    sel.counts[i],
                    rej.counts[i]
                )
                .unwrap();
            }
        }
        s
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "selected={}\nrejected={}\nmedian_opacity_selected={:.6}\nmedian_opacity_rejected={:.6}\nmedian_log10_volume_selected={:.6}\nmedian_log10_volume_rejected={:.6}\n",
            self.opacity_selected.total(),
            self.opacity_rejected.total(),
            self.median_opacity_selected,
            self.median_opacity_rejected,
            self.median_log_volume_selected,
            self.median_log_volume_rejected,
        )
    }
}

//! Real spherical harmonics colour and the peak-normalized Gaussian kernel.

use thiserror::Error;

use crate::gaussians::{coeffs_per_channel, covariance, Gaussian, GaussianError, MAX_SH_DEGREE};
use crate::real::Real;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Error)]
pub enum ShadingError {
    #[error("SH degree {0} exceeds 3")]
    Degree(usize),
    #[error("view direction has zero length")]
    ZeroDirection,
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Unit direction from the camera centre toward a Gaussian, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDirection([f64; 3]);

impl ViewDirection {
    pub fn new(v: [f64; 3]) -> Result<Self, ShadingError> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(ShadingError::ZeroDirection);
        }
        Ok(Self(v.map(|c| c / n)))
    }

    pub fn from_points(eye: [f64; 3], target: [f64; 3]) -> Result<Self, ShadingError> {
        Self::new([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

/// Real SH basis up to degree `degree` at unit direction `v`, written into `out`
/// (length `(degree+1)^2`). Unchecked inner routine shared with the rasterizer.
pub fn sh_basis_into<T: Real>(v: [T; 3], degree: usize, out: &mut [T]) {
    let [x, y, z] = v;
    let c = T::lit;
    out[0] = c(SH_C0);
    if degree < 1 {
        return;
    }
    out[1] = -c(SH_C1) * y;
    out[2] = c(SH_C1) * z;
    out[3] = -c(SH_C1) * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = c(SH_C2[0]) * xy;
    out[5] = c(SH_C2[1]) * yz;
    out[6] = c(SH_C2[2]) * (c(2.0) * zz - xx - yy);
    out[7] = c(SH_C2[3]) * xz;
    out[8] = c(SH_C2[4]) * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = c(SH_C3[0]) * y * (c(3.0) * xx - yy);
    out[10] = c(SH_C3[1]) * xy * z;
    out[11] = c(SH_C3[2]) * y * (c(4.0) * zz - xx - yy);
    out[12] = c(SH_C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy);
    out[13] = c(SH_C3[4]) * x * (c(4.0) * zz - xx - yy);
    out[14] = c(SH_C3[5]) * z * (xx - yy);
    out[15] = c(SH_C3[6]) * x * (xx - c(3.0) * yy);
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`,
/// treating the components as independent. Project onto the sphere tangent
/// plane to get the derivative along the unit sphere.
pub fn sh_basis_poly_grad_into<T: Real>(v: [T; 3], degree: usize, out: &mut [[T; 3]]) {
    let [x, y, z] = v;
    let c = T::lit;
    let zero = T::zero();
    out[0] = [zero; 3];
    if degree < 1 {
        return;
    }
    let c1 = c(SH_C1);
    out[1] = [zero, -c1, zero];
    out[2] = [zero, zero, c1];
    out[3] = [-c1, zero, zero];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let two = c(2.0);
    out[4] = [c(SH_C2[0]) * y, c(SH_C2[0]) * x, zero];
    out[5] = [zero, c(SH_C2[1]) * z, c(SH_C2[1]) * y];
    out[6] = [
        -two * c(SH_C2[2]) * x,
        -two * c(SH_C2[2]) * y,
        c(4.0) * c(SH_C2[2]) * z,
    ];
    out[7] = [c(SH_C2[3]) * z, zero, c(SH_C2[3]) * x];
    out[8] = [two * c(SH_C2[4]) * x, -two * c(SH_C2[4]) * y, zero];
    if degree < 3 {
        return;
    }
    let k = SH_C3.map(c);
    // y(3xx - yy)
    out[9] = [k[0] * c(6.0) * x * y, k[0] * (c(3.0) * xx - c(3.0) * yy), zero];
    // xyz
    out[10] = [k[1] * y * z, k[1] * x * z, k[1] * x * y];
    // y(4zz - xx - yy)
    out[11] = [
        k[2] * (-two * x * y),
        k[2] * (c(4.0) * zz - xx - c(3.0) * yy),
        k[2] * (c(8.0) * y * z),
    ];
    // z(2zz - 3xx - 3yy)
    out[12] = [
        k[3] * (-c(6.0) * x * z),
        k[3] * (-c(6.0) * y * z),
        k[3] * (c(6.0) * zz - c(3.0) * xx - c(3.0) * yy),
    ];
    // x(4zz - xx - yy)
    out[13] = [
        k[4] * (c(4.0) * zz - c(3.0) * xx - yy),
        k[4] * (-two * x * y),
        k[4] * (c(8.0) * x * z),
    ];
    // z(xx - yy)
    out[14] = [k[5] * two * x * z, -k[5] * two * y * z, k[5] * (xx - yy)];
    // x(xx - 3yy)
    out[15] = [k[6] * (c(3.0) * xx - c(3.0) * yy), -k[6] * c(6.0) * x * y, zero];
}

/// Real SH basis values `Y_l^m(v)` for `l <= degree`, ordered by band then
/// order (`m = -l..=l`).
pub fn sh_basis(v: &ViewDirection, degree: usize) -> Result<Vec<f64>, ShadingError> {
    if degree > MAX_SH_DEGREE {
        return Err(ShadingError::Degree(degree));
    }
    let mut out = vec![0.0; coeffs_per_channel(degree)];
    sh_basis_into(v.0, degree, &mut out);
    Ok(out)
}

/// View-dependent colour before the `+0.5` shift and clamp.
pub fn sh_color_unclamped(g: &Gaussian, v: &ViewDirection) -> Result<[f64; 3], ShadingError> {
    let basis = sh_basis(v, g.sh_degree)?;
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        for (k, &y) in basis.iter().enumerate() {
            *out += g.sh(k, ch) as f64 * y;
        }
    }
    Ok(rgb)
}

/// View-dependent colour, shifted by `+0.5` and clamped to `[0, 1]`.
pub fn sh_color(g: &Gaussian, v: &ViewDirection) -> Result<[f64; 3], ShadingError> {
    Ok(sh_color_unclamped(g, v)?.map(|c| (c + 0.5).clamp(0.0, 1.0)))
}

/// Peak-normalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn gaussian_density(g: &Gaussian, x: [f64; 3]) -> Result<f64, ShadingError> {
    let mut sigma = covariance(g)?;
    let mut inv = invert3(&sigma);
    if inv.is_none() {
        for (i, row) in sigma.iter_mut().enumerate() {
            row[i] += 1e-8;
        }
        inv = invert3(&sigma);
    }
    let inv = inv.ok_or(ShadingError::Gaussian(GaussianError::ZeroQuaternion))?;
    let d = [
        x[0] - g.position[0] as f64,
        x[1] - g.position[1] as f64,
        x[2] - g.position[2] as f64,
    ];
    let mut q = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            q += d[i] * inv[i][j] * d[j];
        }
    }
    Ok((-0.5 * q.max(0.0)).exp())
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c00 = cof(1, 2, 1, 2);
    let c01 = -cof(1, 2, 0, 2);
    let c02 = cof(1, 2, 0, 1);
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    let adj = [
        [c00, -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [c01, cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [c02, -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

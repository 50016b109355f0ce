//! Gaussian cloud data model and binary little-endian PLY interchange.
//!
//! Parameters are stored raw (pre-activation), exactly as they appear on disk:
//! opacity is a logit, scale is a log-scale, the rotation is an unnormalized
//! `(w, x, y, z)` quaternion. Activations are applied at the point of use.
//!
//! The vertex layout is, in order and all `float`:
//! `x y z nx ny nz f_dc_0..2 f_rest_0..M-1 opacity scale_0..2 rot_0..3`
//! with `M = 3((L+1)^2 - 1)` for SH degree `L`. `f_rest` is channel-major
//! (all red higher-order coefficients, then green, then blue).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::real::{sigmoid, Real};

pub const MAX_SH_DEGREE: usize = 3;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("ply load rejected at byte {offset}: {reason}")]
    Load { offset: usize, reason: String },
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("expected {expected} SH coefficients for degree {degree}, got {got}")]
    ShLength {
        degree: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported SH degree {0} (max 3)")]
    ShDegree(usize),
    #[error("cloud mixes SH degrees {0} and {1}")]
    MixedDegree(usize, usize),
    #[error("index {index} out of range for cloud of {len}")]
    Index { index: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GaussianError>;

/// Number of SH coefficients per colour channel at degree `l`.
pub const fn coeffs_per_channel(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Floats stored per Gaussian on disk (normals included).
pub const fn floats_per_gaussian(degree: usize) -> usize {
    3 + 3 + 3 * coeffs_per_channel(degree) + 1 + 3 + 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// `(w, x, y, z)`, not necessarily unit length.
    pub rotation: [f32; 4],
    pub log_scale: [f32; 3],
    pub opacity_logit: f32,
    /// Disk order: `f_dc_0..2` then channel-major `f_rest`.
    pub sh_coeffs: Vec<f32>,
    pub sh_degree: usize,
}

impl Gaussian {
    /// A Gaussian with identity rotation and only a DC colour term.
    pub fn new(
        position: [f32; 3],
        log_scale: [f32; 3],
        opacity_logit: f32,
        dc: [f32; 3],
        sh_degree: usize,
    ) -> Self {
        let mut sh_coeffs = vec![0.0; 3 * coeffs_per_channel(sh_degree)];
        sh_coeffs[..3].copy_from_slice(&dc);
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale,
            opacity_logit,
            sh_coeffs,
            sh_degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(GaussianError::ShDegree(self.sh_degree));
        }
        let expected = 3 * coeffs_per_channel(self.sh_degree);
        if self.sh_coeffs.len() != expected {
            return Err(GaussianError::ShLength {
                degree: self.sh_degree,
                expected,
                got: self.sh_coeffs.len(),
            });
        }
        if self.rotation.iter().all(|&c| c == 0.0) {
            return Err(GaussianError::ZeroQuaternion);
        }
        Ok(())
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|l| (l as f64).exp())
    }

    pub fn unit_rotation(&self) -> Result<[f64; 4]> {
        let q = self.rotation.map(|c| c as f64);
        normalize_quat(q).ok_or(GaussianError::ZeroQuaternion)
    }

    /// SH coefficient `k` (0-based, `k < (L+1)^2`) of colour channel `channel`.
    pub fn sh(&self, k: usize, channel: usize) -> f32 {
        sh_index(self.sh_degree, k, channel).map_or(0.0, |i| self.sh_coeffs[i])
    }

    pub fn sh_mut(&mut self, k: usize, channel: usize) -> Option<&mut f32> {
        sh_index(self.sh_degree, k, channel).map(|i| &mut self.sh_coeffs[i])
    }

    /// SH coefficients as a 48-vector in coefficient-major order
    /// (`k * 3 + channel`), zero-padded above this Gaussian's degree.
    pub fn sh_flat48(&self) -> [f32; 48] {
        let mut out = [0.0; 48];
        for k in 0..coeffs_per_channel(self.sh_degree) {
            for ch in 0..3 {
                out[k * 3 + ch] = self.sh(k, ch);
            }
        }
        out
    }
}

/// Position in `sh_coeffs` of coefficient `k` for `channel`, if present.
pub fn sh_index(degree: usize, k: usize, channel: usize) -> Option<usize> {
    let per = coeffs_per_channel(degree);
    if k >= per || channel >= 3 {
        return None;
    }
    if k == 0 {
        Some(channel)
    } else {
        Some(3 + channel * (per - 1) + (k - 1))
    }
}

pub fn normalize_quat<T: Real>(q: [T; 4]) -> Option<[T; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > T::zero() && n.is_finite() {
        Some(q.map(|c| c / n))
    } else {
        None
    }
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion, row-major.
pub fn quat_to_rotmat<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// `Σ = R S Sᵀ Rᵀ` from raw rotation and log-scale, generic over precision.
pub fn covariance_from_raw<T: Real>(rotation: [T; 4], log_scale: [T; 3]) -> Option<[[T; 3]; 3]> {
    let q = normalize_quat(rotation)?;
    let r = quat_to_rotmat(q);
    let s = log_scale.map(|l| l.exp());
    // M = R S, Σ = M Mᵀ
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    let mut sigma = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += m[i][k] * m[j][k];
            }
            sigma[i][j] = acc;
        }
    }
    Some(sigma)
}

/// World-space covariance of a Gaussian in double precision.
pub fn covariance(g: &Gaussian) -> Result<[[f64; 3]; 3]> {
    covariance_from_raw(g.rotation.map(|c| c as f64), g.log_scale.map(|c| c as f64))
        .ok_or(GaussianError::ZeroQuaternion)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(GaussianError::ShDegree(sh_degree));
        }
        for g in &gaussians {
            if g.sh_degree != sh_degree {
                return Err(GaussianError::MixedDegree(sh_degree, g.sh_degree));
            }
            g.validate()?;
        }
        Ok(Self {
            gaussians,
            sh_degree,
        })
    }

    pub fn empty(sh_degree: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// New cloud holding `indices` in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let g = self.gaussians.get(i).ok_or(GaussianError::Index {
                index: i,
                len: self.len(),
            })?;
            out.push(g.clone());
        }
        Ok(Self {
            gaussians: out,
            sh_degree: self.sh_degree,
        })
    }

    pub fn positions(&self) -> Vec<[f32; 3]> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Exact on-disk size of this cloud as written by [`write_ply`].
    pub fn ply_size_bytes(&self) -> u64 {
        ply_size_bytes(self.len(), self.sh_degree)
    }
}

fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (coeffs_per_channel(degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn header(n: usize, degree: usize) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {n}\n"));
    for name in property_names(degree) {
        h.push_str(&format!("property float {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

/// Size in bytes of a canonical file with `n` Gaussians at degree `degree`.
pub fn ply_size_bytes(n: usize, degree: usize) -> u64 {
    header(n, degree).len() as u64 + (n as u64) * (floats_per_gaussian(degree) as u64) * 4
}

/// Serialize to the canonical binary layout.
pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let degree = cloud.sh_degree;
    let head = header(cloud.len(), degree);
    let per = floats_per_gaussian(degree);
    let mut out = Vec::with_capacity(head.len() + cloud.len() * per * 4);
    out.extend_from_slice(head.as_bytes());
    let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    for g in &cloud.gaussians {
        g.position.iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        g.sh_coeffs.iter().for_each(|&v| put(v));
        put(g.opacity_logit);
        g.log_scale.iter().for_each(|&v| put(v));
        g.rotation.iter().for_each(|&v| put(v));
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ply(cloud))?;
    Ok(())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let bytes = fs::read(path)?;
    decode_ply(&bytes)
}

fn reject<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(GaussianError::Load {
        offset,
        reason: reason.into(),
    })
}

/// Parse a binary little-endian PLY held in memory.
pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(GaussianError::Load {
                offset: start,
                reason: "unterminated header line".into(),
            })?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel]).map_err(|_| {
            GaussianError::Load {
                offset: start,
                reason: "header is not valid UTF-8".into(),
            }
        })?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return reject(off, "missing 'ply' magic");
    }
    let mut vertex_count: Option<usize> = None;
    let mut format_seen = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, ver] => {
                if *fmt != "binary_little_endian" || *ver != "1.0" {
                    return reject(off, format!("unsupported format '{fmt} {ver}'"));
                }
                format_seen = true;
            }
            ["element", name, count] => {
                if *name != "vertex" || vertex_count.is_some() {
                    return reject(off, format!("unexpected element '{name}'"));
                }
                let n = count
                    .parse::<usize>()
                    .or_else(|_| reject(off, format!("bad vertex count '{count}'")))?;
                vertex_count = Some(n);
            }
            ["property", ty, name] => {
                if vertex_count.is_none() {
                    return reject(off, "property before element");
                }
                if *ty != "float" && *ty != "float32" {
                    return reject(off, format!("property '{name}' has type '{ty}', expected float"));
                }
                props.push(name.to_string());
            }
            _ => return reject(off, format!("malformed header line '{line}'")),
        }
    }
    if !format_seen {
        return reject(0, "missing format line");
    }
    let n = match vertex_count {
        Some(n) => n,
        None => return reject(0, "missing vertex element"),
    };

    let rest_count = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    let degree = match rest_count {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        other => return reject(0, format!("{other} f_rest properties match no SH degree")),
    };
    let expected = property_names(degree);
    if props != expected {
        let bad = props
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(props.len().min(expected.len()));
        return reject(
            0,
            format!(
                "property mismatch at #{bad}: got {:?}, expected {:?}",
                props.get(bad),
                expected.get(bad)
            ),
        );
    }

    let per = floats_per_gaussian(degree);
    let payload = &bytes[pos..];
    let need = n * per * 4;
    if payload.len() < need {
        return reject(
            pos + payload.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        );
    }
    if payload.len() > need {
        return reject(pos + need, "trailing bytes after vertex payload");
    }

    let ncoef = 3 * coeffs_per_channel(degree);
    let mut gaussians = Vec::with_capacity(n);
    let mut vals = vec![0f32; per];
    for v in 0..n {
        let base = pos + v * per * 4;
        for (j, slot) in vals.iter_mut().enumerate() {
            let o = base + j * 4;
            let x = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
            if !x.is_finite() {
                return reject(o, format!("non-finite value in '{}'", expected[j]));
            }
            *slot = x;
        }
        let sh_end = 6 + ncoef;
        let g = Gaussian {
            position: [vals[0], vals[1], vals[2]],
            sh_coeffs: vals[6..sh_end].to_vec(),
            opacity_logit: vals[sh_end],
            log_scale: [vals[sh_end + 1], vals[sh_end + 2], vals[sh_end + 3]],
            rotation: [
                vals[sh_end + 4],
                vals[sh_end + 5],
                vals[sh_end + 6],
                vals[sh_end + 7],
            ],
            sh_degree: degree,
        };
        if g.rotation.iter().all(|&c| c == 0.0) {
            return reject(base + (sh_end + 4) * 4, "zero quaternion");
        }
        gaussians.push(g);
    }
    Ok(GaussianCloud {
        gaussians,
        sh_degree: degree,
    })
}

//! Deterministic synthetic scenes: dense clouds, orbit camera rigs, train/test
//! splits and a two-population fixture for pruning experiments.
//!
//! All sampling uses `ChaCha8Rng` seeded from [`SceneSpec::seed`], with one
//! stream per component (Gaussians, cameras, mixture) so that changing the
//! camera count never perturbs the cloud.
//!
//! Camera file: one line per camera,
//! `fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 split`
//! where `R` and `t` map world to camera coordinates and `split` is `train` or
//! `test`. Near and far planes are not stored and take the rasterizer defaults.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, FlatConfig};
use crate::gaussians::{Gaussian, GaussianCloud, GaussianError};
use crate::image_io::Image;
use crate::rasterizer::{rasterize, Camera, RasterError};

const STREAM_GAUSSIANS: u64 = 1;
const STREAM_CAMERAS: u64 = 2;
const STREAM_MIXTURE: u64 = 3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("camera file line {line}: {reason}")]
    CameraFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_gaussians: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub opacity_logit_range: (f64, f64),
    pub log_scale_range: (f64, f64),
    pub dc_range: (f64, f64),
    pub rest_range: (f64, f64),
    pub sh_degree: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub orbit_radius: f64,
    pub fov_deg: f64,
    /// Elevation above the orbit plane, radians.
    pub elevation_range: (f64, f64),
    pub test_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 600,
            box_min: [-1.0; 3],
            box_max: [1.0; 3],
            opacity_logit_range: (-1.0, 3.0),
            log_scale_range: (-3.2, -2.0),
            dc_range: (-1.2, 1.2),
            rest_range: (-0.2, 0.2),
            sh_degree: 3,
            n_cameras: 20,
            width: 48,
            height: 48,
            orbit_radius: 3.5,
            fov_deg: 50.0,
            elevation_range: (0.1, 0.6),
            test_fraction: 0.1,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "seed",
    "n_gaussians",
    "box_min",
    "box_max",
    "opacity_logit_range",
    "log_scale_range",
    "dc_range",
    "rest_range",
    "sh_degree",
    "n_cameras",
    "width",
    "height",
    "orbit_radius",
    "fov_deg",
    "elevation_range",
    "test_fraction",
];

fn triple(v: Vec<f64>, key: &str) -> Result<[f64; 3]> {
    v.try_into().map_err(|_| SceneError::Spec(format!("{key} needs 3 values")))
}

fn pair(v: Vec<f64>, key: &str) -> Result<(f64, f64)> {
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(SceneError::Spec(format!("{key} needs 2 values"))),
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Spec(m.to_string()));
        if self.n_gaussians == 0 || self.n_cameras == 0 || self.width == 0 || self.height == 0 {
            return bad("counts and image size must be positive");
        }
        if (0..3).any(|i| !(self.box_min[i] < self.box_max[i])) {
            return bad("degenerate bounding box");
        }
        for (name, (lo, hi)) in [
            ("opacity_logit_range", self.opacity_logit_range),
            ("log_scale_range", self.log_scale_range),
            ("dc_range", self.dc_range),
            ("rest_range", self.rest_range),
            ("elevation_range", self.elevation_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SceneError::Spec(format!("{name} must satisfy lo <= hi")));
            }
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be at most 3");
        }
        if !(self.orbit_radius > 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("orbit_radius and fov_deg out of range");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        cfg.check_known(SPEC_KEYS)?;
        let mut s = Self::default();
        cfg.set("seed", &mut s.seed)?;
        cfg.set("n_gaussians", &mut s.n_gaussians)?;
        cfg.set("sh_degree", &mut s.sh_degree)?;
        cfg.set("n_cameras", &mut s.n_cameras)?;
        cfg.set("width", &mut s.width)?;
        cfg.set("height", &mut s.height)?;
        cfg.set("orbit_radius", &mut s.orbit_radius)?;
        cfg.set("fov_deg", &mut s.fov_deg)?;
        cfg.set("test_fraction", &mut s.test_fraction)?;
        if let Some(v) = cfg.get_list("box_min")? {
            s.box_min = triple(v, "box_min")?;
        }
        if let Some(v) = cfg.get_list("box_max")? {
            s.box_max = triple(v, "box_max")?;
        }
        for (key, slot) in [
            ("opacity_logit_range", &mut s.opacity_logit_range),
            ("log_scale_range", &mut s.log_scale_range),
            ("dc_range", &mut s.dc_range),
            ("rest_range", &mut s.rest_range),
            ("elevation_range", &mut s.elevation_range),
        ] {
            if let Some(v) = cfg.get_list(key)? {
                *slot = pair(v, key)?;
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_config_text(&self) -> String {
        let mut t = String::new();
        let r = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let v = |a: [f64; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        writeln!(t, "seed = {}", self.seed).unwrap();
        writeln!(t, "n_gaussians = {}", self.n_gaussians).unwrap();
        writeln!(t, "box_min = {}", v(self.box_min)).unwrap();
        writeln!(t, "box_max = {}", v(self.box_max)).unwrap();
        writeln!(t, "opacity_logit_range = {}", r(self.opacity_logit_range)).unwrap();
        writeln!(t, "log_scale_range = {}", r(self.log_scale_range)).unwrap();
        writeln!(t, "dc_range = {}", r(self.dc_range)).unwrap();
        writeln!(t, "rest_range = {}", r(self.rest_range)).unwrap();
        writeln!(t, "sh_degree = {}", self.sh_degree).unwrap();
        writeln!(t, "n_cameras = {}", self.n_cameras).unwrap();
        writeln!(t, "width = {}", self.width).unwrap();
        writeln!(t, "height = {}", self.height).unwrap();
        writeln!(t, "orbit_radius = {}", self.orbit_radius).unwrap();
        writeln!(t, "fov_deg = {}", self.fov_deg).unwrap();
        writeln!(t, "elevation_range = {}", r(self.elevation_range)).unwrap();
        writeln!(t, "test_fraction = {}", self.test_fraction).unwrap();
        t
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.box_min[i] + self.box_max[i]))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Evenly spaced test views, `round(fraction·n)` of them (at least one
    /// when `n ≥ 2` and `fraction > 0`).
    pub fn evenly_spaced(n: usize, fraction: f64) -> Self {
        let mut n_test = (fraction * n as f64).round() as usize;
        if n >= 2 && fraction > 0.0 {
            n_test = n_test.max(1);
        }
        n_test = n_test.min(n.saturating_sub(1));
        let test: Vec<usize> = (0..n_test).map(|j| ((j as f64 + 0.5) * n as f64 / n_test as f64) as usize).collect();
        let train = (0..n).filter(|i| !test.contains(i)).collect();
        Self { train, test }
    }

    pub fn is_test(&self, i: usize) -> bool {
        self.test.contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub split: Split,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Uniform random unit quaternion (Shoemake).
pub fn random_rotation(rng: &mut impl Rng) -> [f32; 4] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
    [b * t3.cos(), a * t2.sin(), a * t2.cos(), b * t3.sin()].map(|c| c as f32)
}

fn sample_gaussian(spec: &SceneSpec, rng: &mut impl Rng, logit: (f64, f64), log_scale: (f64, f64)) -> Gaussian {
    let position = [0, 1, 2].map(|i| uniform(rng, (spec.box_min[i], spec.box_max[i])) as f32);
    let ls = [0; 3].map(|_| uniform(rng, log_scale) as f32);
    let op = uniform(rng, logit) as f32;
    let dc = [0; 3].map(|_| uniform(rng, spec.dc_range) as f32);
    let mut g = Gaussian::new(position, ls, op, dc, spec.sh_degree);
    for c in g.sh_coeffs.iter_mut().skip(3) {
        *c = uniform(rng, spec.rest_range) as f32;
    }
    g.rotation = random_rotation(rng);
    g
}

/// Orbit cameras around the box centre at evenly spaced azimuths.
pub fn orbit_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let mut rng = spec.rng(STREAM_CAMERAS);
    let c = spec.center();
    let focal = 0.5 * spec.width as f64 / (0.5 * spec.fov_deg.to_radians()).tan();
    (0..spec.n_cameras)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / spec.n_cameras as f64 + rng.random_range(-0.1..0.1);
            let el = uniform(&mut rng, spec.elevation_range);
            let r = spec.orbit_radius;
            let eye = [
                c[0] + r * el.cos() * az.sin(),
                c[1] - r * el.sin(),
                c[2] - r * el.cos() * az.cos(),
            ];
            Ok(Camera::look_at(eye, c, [0.0, -1.0, 0.0], focal, spec.width, spec.height)?)
        })
        .collect()
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = spec.rng(STREAM_GAUSSIANS);
    let gs = (0..spec.n_gaussians)
        .map(|_| sample_gaussian(spec, &mut rng, spec.opacity_logit_range, spec.log_scale_range))
        .collect();
    let cloud = GaussianCloud::new(gs, spec.sh_degree)?;
    let cameras = orbit_cameras(spec)?;
    let split = Split::evenly_spaced(spec.n_cameras, spec.test_fraction);
    Ok(Scene { cloud, cameras, split })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    SmallOpaque,
    LargeTransparent,
}

/// Sampling ranges of the two mixture populations.
pub mod mixture_ranges {
    pub const SMALL_OPAQUE_LOGIT: (f64, f64) = (0.5, 3.0);
    pub const SMALL_OPAQUE_LOG_SCALE: (f64, f64) = (-3.2, -2.4);
    pub const LARGE_TRANSPARENT_LOGIT: (f64, f64) = (-2.5, 0.0);
    /// Shared per-Gaussian base; each axis adds `±LARGE_AXIS_JITTER`.
    pub const LARGE_TRANSPARENT_LOG_SCALE: (f64, f64) = (-2.4, -0.7);
    pub const LARGE_AXIS_JITTER: f64 = 0.2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub cloud: GaussianCloud,
    pub labels: Vec<Population>,
}

/// Two interleaved populations: `ceil(n/2)` small opaque Gaussians and
/// `floor(n/2)` large transparent ones whose volumes are log-uniform over
/// several decades. Opacity ranges overlap only at a single point.
pub fn mixture_cloud(spec: &SceneSpec) -> Result<Mixture> {
    use mixture_ranges::*;
    spec.validate()?;
    let mut rng = spec.rng(STREAM_MIXTURE);
    let mut gs = Vec::with_capacity(spec.n_gaussians);
    let mut labels = Vec::with_capacity(spec.n_gaussians);
    for i in 0..spec.n_gaussians {
        if i % 2 == 0 {
            gs.push(sample_gaussian(spec, &mut rng, SMALL_OPAQUE_LOGIT, SMALL_OPAQUE_LOG_SCALE));
            labels.push(Population::SmallOpaque);
        } else {
            let mut g = sample_gaussian(spec, &mut rng, LARGE_TRANSPARENT_LOGIT, (0.0, 0.0));
            let base = uniform(&mut rng, LARGE_TRANSPARENT_LOG_SCALE);
            g.log_scale = [0; 3].map(|_| (base + uniform(&mut rng, (-LARGE_AXIS_JITTER, LARGE_AXIS_JITTER))) as f32);
            gs.push(g);
            labels.push(Population::LargeTransparent);
        }
    }
    Ok(Mixture {
        cloud: GaussianCloud::new(gs, spec.sh_degree)?,
        labels,
    })
}

/// Render every camera in parallel.
pub fn render_views(cloud: &GaussianCloud, cameras: &[Camera]) -> Result<Vec<Image>> {
    cameras
        .par_iter()
        .map(|c| Ok(Image::from_render(&rasterize(cloud, c)?)))
        .collect()
}

pub fn cameras_to_text(cameras: &[Camera], split: &Split) -> String {
    let mut s = String::new();
    for (i, c) in cameras.iter().enumerate() {
        write!(s, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height).unwrap();
        for row in &c.rotation {
            for v in row {
                write!(s, " {v}").unwrap();
            }
        }
        for v in &c.translation {
            write!(s, " {v}").unwrap();
        }
        let tag = if split.is_test(i) { "test" } else { "train" };
        writeln!(s, " {tag}").unwrap();
    }
    s
}

pub fn cameras_from_text(text: &str) -> Result<(Vec<Camera>, Split)> {
    let mut cams = Vec::new();
    let mut split = Split::default();
    for (i, line) in text.lines().enumerate() {
        let fail = |reason: String| SceneError::CameraFile { line: i + 1, reason };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        if t.len() != 19 {
            return Err(fail(format!("expected 19 fields, found {}", t.len())));
        }
        let f = |k: usize| t[k].parse::<f64>().map_err(|e| fail(format!("field {}: {e}", k + 1)));
        let u = |k: usize| t[k].parse::<usize>().map_err(|e| fail(format!("field {}: {e}", k + 1)));
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f(6 + 3 * r + c)?;
            }
        }
        let cam = Camera {
            fx: f(0)?,
            fy: f(1)?,
            cx: f(2)?,
            cy: f(3)?,
            width: u(4)?,
            height: u(5)?,
            rotation,
            translation: [f(15)?, f(16)?, f(17)?],
            near: crate::rasterizer::DEFAULT_NEAR,
            far: crate::rasterizer::DEFAULT_FAR,
        };
        cam.validate().map_err(|e| fail(e.to_string()))?;
        let idx = cams.len();
        match t[18] {
            "train" => split.train.push(idx),
            "test" => split.test.push(idx),
            other => return Err(fail(format!("unknown split tag `{other}`"))),
        }
        cams.push(cam);
    }
    Ok((cams, split))
}

pub fn write_cameras(path: &Path, cameras: &[Camera], split: &Split) -> Result<()> {
    std::fs::write(path, cameras_to_text(cameras, split))?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<(Vec<Camera>, Split)> {
    cameras_from_text(&std::fs::read_to_string(path)?)
}

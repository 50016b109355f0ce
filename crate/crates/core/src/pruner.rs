//! Geometry-driven pruning: rank Gaussians by a weighted sum of z-scored
//! activated opacity and ellipsoid volume, then keep the top K.
//!
//! ```text
//! score_i = λ · z(α_i) + (1 − λ) · z(4/3 · π · s_x s_y s_z)
//! ```
//!
//! z-scores use population statistics over the whole cloud, accumulated with
//! pairwise summation so scores are bit-reproducible. A zero-variance input
//! z-scores to all zeros.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::gaussians::{Gaussian, GaussianCloud, GaussianError};
use crate::real::{pairwise_sum, pairwise_sum_by};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("cannot score an empty cloud")]
    EmptyCloud,
    #[error("lambda_alpha {0} outside [0, 1]")]
    Lambda(f64),
    #[error("keep fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("keep count {k} outside [1, {n}]")]
    KeepCount { k: usize, n: usize },
    #[error("unknown volume space '{0}' (expected raw or log)")]
    VolumeSpace(String),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

/// Which volume quantity enters the z-score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VolumeSpace {
    /// `4/3 π s_x s_y s_z`, as written in the score definition.
    #[default]
    Raw,
    /// Natural log of the raw volume; tames the heavy right tail.
    Log,
}

impl FromStr for VolumeSpace {
    type Err = PruneError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "log" => Ok(Self::Log),
            other => Err(PruneError::VolumeSpace(other.to_string())),
        }
    }
}

impl std::fmt::Display for VolumeSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Log => "log",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Keep {
    Fraction(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub lambda_alpha: f64,
    pub keep: Keep,
    pub volume_space: VolumeSpace,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            lambda_alpha: 0.3,
            keep: Keep::Fraction(0.5),
            volume_space: VolumeSpace::Raw,
        }
    }
}

impl PruneConfig {
    pub fn with_fraction(lambda_alpha: f64, fraction: f64) -> Self {
        Self {
            lambda_alpha,
            keep: Keep::Fraction(fraction),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_alpha) {
            return Err(PruneError::Lambda(self.lambda_alpha));
        }
        if let Keep::Fraction(f) = self.keep {
            if !(f > 0.0 && f <= 1.0) {
                return Err(PruneError::Fraction(f));
            }
        }
        Ok(())
    }

    /// Resolve the number of Gaussians to keep out of `n`.
    pub fn keep_count(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let k = match self.keep {
            Keep::Count(k) => k,
            Keep::Fraction(f) => ((f * n as f64).round() as usize).clamp(1, n.max(1)),
        };
        if k == 0 || k > n {
            return Err(PruneError::KeepCount { k, n });
        }
        Ok(k)
    }
}

/// Population z-score. Zero variance maps every entry to 0.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = pairwise_sum(values) / n as f64;
    let var = pairwise_sum_by(values, |&x| (x - mean) * (x - mean)) / n as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; n];
    }
    values.iter().map(|&x| (x - mean) / std).collect()
}

/// Ellipsoid volume `4/3 π s_x s_y s_z` of the activated scales.
pub fn volume(g: &Gaussian) -> f64 {
    let [sx, sy, sz] = g.scale();
    4.0 / 3.0 * std::f64::consts::PI * sx * sy * sz
}

pub fn log10_volume(g: &Gaussian) -> f64 {
    volume(g).log10()
}

pub fn score(cloud: &GaussianCloud, cfg: &PruneConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(PruneError::EmptyCloud);
    }
    let opacity: Vec<f64> = cloud.iter().map(Gaussian::opacity).collect();
    let vol: Vec<f64> = cloud
        .iter()
        .map(|g| match cfg.volume_space {
            VolumeSpace::Raw => volume(g),
            VolumeSpace::Log => volume(g).ln(),
        })
        .collect();
    let za = zscore(&opacity);
    let zv = zscore(&vol);
    let lam = cfg.lambda_alpha;
    Ok(za
        .iter()
        .zip(&zv)
        .map(|(&a, &v)| lam * a + (1.0 - lam) * v)
        .collect())
}

/// Indices of the `k` largest scores, ties broken by lower index, returned in
/// ascending index order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(PruneError::KeepCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupStats {
    pub count: usize,
    pub mean_opacity: f64,
    pub median_opacity: f64,
    pub mean_log10_volume: f64,
    pub median_log10_volume: f64,
}

impl GroupStats {
    fn from_members(cloud: &GaussianCloud, members: &[usize]) -> Self {
        if members.is_empty() {
            return Self {
                count: 0,
                mean_opacity: f64::NAN,
                median_opacity: f64::NAN,
                mean_log10_volume: f64::NAN,
                median_log10_volume: f64::NAN,
            };
        }
        let op: Vec<f64> = members.iter().map(|&i| cloud.gaussians[i].opacity()).collect();
        let lv: Vec<f64> = members.iter().map(|&i| log10_volume(&cloud.gaussians[i])).collect();
        let n = members.len() as f64;
        Self {
            count: members.len(),
            mean_opacity: pairwise_sum(&op) / n,
            median_opacity: median(&op),
            mean_log10_volume: pairwise_sum(&lv) / n,
            median_log10_volume: median(&lv),
        }
    }
}

/// Median with the two-middle average for even lengths; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    /// Ascending indices into the input cloud.
    pub selected: Vec<usize>,
    pub lambda_alpha: f64,
    pub volume_space: VolumeSpace,
    pub selected_stats: GroupStats,
    pub rejected_stats: GroupStats,
}

impl ScoreReport {
    pub fn build(cloud: &GaussianCloud, scores: Vec<f64>, selected: Vec<usize>, cfg: &PruneConfig) -> Self {
        let mut mask = vec![false; cloud.len()];
        for &i in &selected {
            mask[i] = true;
        }
        let rejected: Vec<usize> = (0..cloud.len()).filter(|&i| !mask[i]).collect();
        Self {
            selected_stats: GroupStats::from_members(cloud, &selected),
            rejected_stats: GroupStats::from_members(cloud, &rejected),
            scores,
            selected,
            lambda_alpha: cfg.lambda_alpha,
            volume_space: cfg.volume_space,
        }
    }

    pub fn is_selected_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.scores.len()];
        for &i in &self.selected {
            mask[i] = true;
        }
        mask
    }

    /// Flat `key=value` summary, one pair per line.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda_alpha={}", self.lambda_alpha);
        let _ = writeln!(s, "volume_space={}", self.volume_space);
        let _ = writeln!(s, "total={}", self.scores.len());
        for (tag, st) in [("selected", &self.selected_stats), ("rejected", &self.rejected_stats)] {
            let _ = writeln!(s, "{tag}.count={}", st.count);
            let _ = writeln!(s, "{tag}.mean_opacity={:.6}", st.mean_opacity);
            let _ = writeln!(s, "{tag}.median_opacity={:.6}", st.median_opacity);
            let _ = writeln!(s, "{tag}.mean_log10_volume={:.6}", st.mean_log10_volume);
            let _ = writeln!(s, "{tag}.median_log10_volume={:.6}", st.median_log10_volume);
        }
        s
    }

    /// Per-Gaussian CSV: `index,score,opacity,log10_volume,selected`.
    pub fn to_csv(&self, cloud: &GaussianCloud) -> String {
        let mask = self.is_selected_mask();
        let mut s = String::from("index,score,opacity,log10_volume,selected\n");
        for (i, g) in cloud.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{:.9},{:.9},{:.9},{}",
                self.scores[i],
                g.opacity(),
                log10_volume(g),
                u8::from(mask[i])
            );
        }
        s
    }
}

/// Keep the top-K Gaussians in their original relative order.
pub fn prune(cloud: &GaussianCloud, cfg: &PruneConfig) -> Result<(GaussianCloud, ScoreReport)> {
    let scores = score(cloud, cfg)?;
    let k = cfg.keep_count(cloud.len())?;
    let selected = select_top_k(&scores, k)?;
    let pruned = cloud.subset(&selected)?;
    let report = ScoreReport::build(cloud, scores, selected, cfg);
    Ok((pruned, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(opacity_logit: f32, log_scale: f32) -> Gaussian {
        Gaussian::new([0.0; 3], [log_scale; 3], opacity_logit, [0.0; 3], 0)
    }

    #[test]
    fn zscore_degenerate_and_two_point() {
        assert_eq!(zscore(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(zscore(&[0.0, 2.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn volume_closed_forms() {
        assert!((volume(&g(0.0, 0.0)) - 4.188_790_204_786_391).abs() < 1e-12);
        let v = volume(&g(0.0, 2f32.ln()));
        assert!((v - 33.510_321_638_291_124).abs() < 1e-5);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&[5.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(matches!(
            select_top_k(&[1.0], 2),
            Err(PruneError::KeepCount { k: 2, n: 1 })
        ));
        assert!(select_top_k(&[1.0], 0).is_err());
    }

    #[test]
    fn keep_count_rounding() {
        let cfg = PruneConfig::with_fraction(0.3, 0.3);
        assert_eq!(cfg.keep_count(588_000).unwrap(), 176_400);
        assert_eq!(PruneConfig::with_fraction(0.3, 0.1).keep_count(3).unwrap(), 1);
        assert!(PruneConfig::with_fraction(0.3, 0.0).keep_count(3).is_err());
        assert!(PruneConfig::with_fraction(1.3, 0.5).validate().is_err());
        let c = PruneConfig {
            keep: Keep::Count(4),
            ..Default::default()
        };
        assert!(c.keep_count(3).is_err());
    }

    #[test]
    fn identity_pruning() {
        let cloud = GaussianCloud::new((0..7).map(|i| g(i as f32 * 0.3 - 1.0, -(i as f32))).collect(), 0).unwrap();
        let (out, rep) = prune(&cloud, &PruneConfig::with_fraction(0.3, 1.0)).unwrap();
        assert_eq!(out, cloud);
        assert_eq!(rep.selected, (0..7).collect::<Vec<_>>());
        assert_eq!(rep.rejected_stats.count, 0);
        assert!(rep.rejected_stats.median_opacity.is_nan());
    }

    #[test]
    fn report_serialization() {
        let cloud = GaussianCloud::new(vec![g(1.0, -1.0), g(-1.0, 0.0)], 0).unwrap();
        let (_, rep) = prune(&cloud, &PruneConfig::with_fraction(1.0, 0.5)).unwrap();
        assert_eq!(rep.selected, vec![0]);
        let kv = rep.to_kv_text();
        assert!(kv.contains("selected.count=1\n"));
        let csv = rep.to_csv(&cloud);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "index,score,opacity,log10_volume,selected");
        assert!(lines[1].starts_with("0,") && lines[1].ends_with(",1"));
        assert!(lines[2].ends_with(",0"));
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(
            score(&GaussianCloud::empty(0), &PruneConfig::default()),
            Err(PruneError::EmptyCloud)
        ));
    }
}

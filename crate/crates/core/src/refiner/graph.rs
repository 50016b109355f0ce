//! Neighbourhood structures: exact k-NN graphs and voxel-grid pooling.

use std::collections::BTreeMap;
use std::rc::Rc;

use rayon::prelude::*;

/// Row-major `N × k` neighbour indices; row `i` starts with `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Exact k nearest neighbours by Euclidean distance. `k` is clamped to `N`;
/// each row lists the point itself first, then the others by increasing
/// distance with ties broken by lower index.
pub fn knn_graph(positions: &[[f64; 3]], k: usize) -> KnnGraph {
    let n = positions.len();
    let k = k.clamp(1, n.max(1));
    if n == 0 {
        return KnnGraph { k, indices: Vec::new() };
    }
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(positions[i], positions[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k - 1 < cand.len() && k > 1 {
                cand.select_nth_unstable_by(k - 2, cmp);
                cand.truncate(k - 1);
            } else {
                cand.truncate(k - 1);
            }
            cand.sort_by(cmp);
            std::iter::once(i).chain(cand.into_iter().map(|c| c.1)).collect()
        })
        .collect();
    KnnGraph {
        k,
        indices: rows.concat(),
    }
}

/// Assignment of fine points to occupied voxels of a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPool {
    pub voxel: f64,
    /// Cluster of every fine point.
    pub assign: Vec<usize>,
    pub counts: Vec<usize>,
    /// Mean position of each cluster.
    pub centers: Vec<[f64; 3]>,
}

impl GridPool {
    pub fn clusters(&self) -> usize {
        self.counts.len()
    }
}

fn bounds(positions: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    (lo, extent)
}

/// Pool with voxels of edge `voxel`; clusters are numbered in voxel-key order.
pub fn grid_pool_with(positions: &[[f64; 3]], voxel: f64) -> GridPool {
    let (lo, _) = bounds(positions);
    let key = |p: [f64; 3]| [0, 1, 2].map(|i| ((p[i] - lo[i]) / voxel).floor() as i64);
    let mut ids: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for p in positions {
        ids.insert(key(*p), 0);
    }
    for (n, v) in ids.values_mut().enumerate() {
        *v = n;
    }
    let m = ids.len();
    let mut counts = vec![0usize; m];
    let mut sums = vec![[0.0f64; 3]; m];
    let assign: Vec<usize> = positions
        .iter()
        .map(|p| {
            let c = ids[&key(*p)];
            counts[c] += 1;
            for i in 0..3 {
                sums[c][i] += p[i];
            }
            c
        })
        .collect();
    let centers = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|v| v / n as f64))
        .collect();
    GridPool {
        voxel,
        assign,
        counts,
        centers,
    }
}

/// Pool to roughly `ratio · N` clusters: the smallest voxel edge (found by
/// bisection) whose occupied-voxel count does not exceed the target.
pub fn grid_pool(positions: &[[f64; 3]], ratio: f64) -> GridPool {
    let n = positions.len();
    let target = ((ratio * n as f64).round() as usize).max(1);
    let (_, extent) = bounds(positions);
    let count = |v: f64| grid_pool_with(positions, v).clusters();
    let mut hi = extent.max(1e-9) * 2.0;
    let mut lo = hi * 1e-9;
    if count(lo) <= target {
        return grid_pool_with(positions, lo);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if count(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    grid_pool_with(positions, hi)
}

/// One resolution level of the refinement hierarchy.
#[derive(Debug, Clone)]
pub struct Level {
    pub positions: Vec<[f64; 3]>,
    pub graph: KnnGraph,
    pub graph_rc: Rc<Vec<usize>>,
    /// `i` repeated `k` times for every row.
    pub repeat: Rc<Vec<usize>>,
    /// Pooling from the previous (finer) level.
    pub pool: Option<(GridPool, Rc<Vec<usize>>)>,
}

impl Level {
    pub fn new(positions: Vec<[f64; 3]>, k: usize, pool: Option<GridPool>) -> Self {
        let graph = knn_graph(&positions, k);
        let repeat = (0..positions.len()).flat_map(|i| std::iter::repeat_n(i, graph.k)).collect();
        Self {
            graph_rc: Rc::new(graph.indices.clone()),
            repeat: Rc::new(repeat),
            pool: pool.map(|p| {
                let a = Rc::new(p.assign.clone());
                (p, a)
            }),
            positions,
            graph,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Levels for a list of stage downsample ratios (the first is ignored).
pub fn build_hierarchy(positions: Vec<[f64; 3]>, k: usize, ratios: &[f64]) -> Vec<Level> {
    let mut levels = vec![Level::new(positions, k, None)];
    for &r in ratios.iter().skip(1) {
        let prev = &levels.last().unwrap().positions;
        let pool = grid_pool(prev, r);
        let centers = pool.centers.clone();
        levels.push(Level::new(centers, k, Some(pool)));
    }
    levels
}

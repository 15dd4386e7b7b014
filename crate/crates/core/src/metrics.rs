//! Chamfer distance (exact nearest neighbours via k-d tree) and
//! Jensen-Shannon divergence over 3D voxel count distributions.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::range_codec::PointCloud;

/// Balanced k-d tree over a point set. Queries are exact: ties between
/// equidistant points resolve to the lowest original point index, matching a
/// linear scan.
pub struct KdTree {
    points: Vec<[f32; 3]>,
    /// Original indices, reordered in-place during construction.
    order: Vec<u32>,
    nodes: Vec<KdNode>,
    root: i32,
}

struct KdNode {
    /// Index into `order`/`points` of the splitting point.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

impl KdTree {
    pub fn build(points: &[[f32; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let pts = points.to_vec();
        let mut tree = KdTree { points: pts, order: Vec::new(), nodes: Vec::new(), root: -1 };
        let n = points.len();
        tree.root = tree.build_rec(&mut order, 0, n, points);
        tree.order = order;
        tree
    }

    fn build_rec(&mut self, order: &mut [u32], lo: usize, hi: usize, points: &[[f32; 3]]) -> i32 {
        if lo >= hi {
            return -1;
        }
        // split on the widest axis of this subset
        let mut min = [f32::INFINITY; 3];
        let mut max = [f32::NEG_INFINITY; 3];
        for &i in &order[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(points[i as usize][a]);
                max[a] = max[a].max(points[i as usize][a]);
            }
        }
        let mut axis = 0usize;
        for a in 1..3 {
            if max[a] - min[a] > max[axis] - min[axis] {
                axis = a;
            }
        }
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = order[mid];
        let left = self.build_rec(order, lo, mid, points);
        let right = self.build_rec(order, mid + 1, hi, points);
        self.nodes.push(KdNode { point, axis: axis as u8, left, right });
        (self.nodes.len() - 1) as i32
    }

    /// Index and squared distance of the exact nearest neighbour.
    pub fn nearest(&self, q: &[f32; 3]) -> Option<(usize, f32)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (u32::MAX, f32::INFINITY);
        self.search(self.root, q, &mut best);
        Some((best.0 as usize, best.1))
    }

    fn search(&self, node: i32, q: &[f32; 3], best: &mut (u32, f32)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = dist2(p, q);
        if d2 < best.1 || (d2 == best.1 && n.point < best.0) {
            *best = (n.point, d2);
        }
        let axis = n.axis as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, best);
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn directed_mean_nn(from: &PointCloud, tree: &KdTree) -> f64 {
    // queries in parallel, reduction in fixed ascending order
    let dists: Vec<f64> = from
        .points
        .par_iter()
        .map(|p| (tree.nearest(p).expect("non-empty tree").1 as f64).sqrt())
        .collect();
    let mut acc = 0.0f64;
    for d in &dists {
        acc += d;
    }
    acc / from.points.len() as f64
}

/// Chamfer distance: sum of the two directed mean nearest-neighbour
/// distances (unsquared Euclidean), in meters.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer", "point clouds must be non-empty"));
    }
    let tree_b = KdTree::build(&b.points);
    let tree_a = KdTree::build(&a.points);
    Ok(directed_mean_nn(a, &tree_b) + directed_mean_nn(b, &tree_a))
}

/// Sparse voxel occupancy counts over a shared grid.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub resolution: f32,
    pub origin: [f32; 3],
    pub dims: [usize; 3],
    pub counts: HashMap<[i64; 3], u64>,
}

impl VoxelGrid {
    fn index(&self, p: &[f32; 3]) -> [i64; 3] {
        let mut idx = [0i64; 3];
        for a in 0..3 {
            idx[a] = (((p[a] - self.origin[a]) / self.resolution) as f64).floor() as i64;
        }
        idx
    }
}

/// Voxelizes both clouds on one grid spanning their union bounding box,
/// padded by one voxel on every side.
pub fn shared_voxel_grids(a: &PointCloud, b: &PointCloud, resolution: f32) -> Result<(VoxelGrid, VoxelGrid)> {
    if resolution <= 0.0 {
        return Err(Error::invalid("voxel_grid", "resolution must be > 0"));
    }
    let mut min = [f32::INFINITY; 3];
    let mut max = [f32::NEG_INFINITY; 3];
    for p in a.points.iter().chain(&b.points) {
        for ax in 0..3 {
            min[ax] = min[ax].min(p[ax]);
            max[ax] = max[ax].max(p[ax]);
        }
    }
    let origin = [min[0] - resolution, min[1] - resolution, min[2] - resolution];
    let mut dims = [0usize; 3];
    for ax in 0..3 {
        dims[ax] = (((max[ax] - origin[ax]) / resolution).floor() as usize) + 2;
    }
    let grid = |cloud: &PointCloud| {
        let mut g = VoxelGrid { resolution, origin, dims, counts: HashMap::new() };
        for p in &cloud.points {
            let idx = g.index(p);
            *g.counts.entry(idx).or_insert(0) += 1;
        }
        g
    };
    Ok((grid(a), grid(b)))
}

/// Jensen-Shannon divergence (base-2 logs, bounded [0,1]) between the
/// count-weighted voxel distributions of the two clouds at the given grid
/// resolution (default 0.15 m).
pub fn jsd_voxel(a: &PointCloud, b: &PointCloud, resolution: f32) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("jsd_voxel", "point clouds must be non-empty"));
    }
    let (ga, gb) = shared_voxel_grids(a, b, resolution)?;
    let na = a.len() as f64;
    let nb = b.len() as f64;
    // deterministic voxel order
    let mut keys: Vec<[i64; 3]> = ga.counts.keys().chain(gb.counts.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    // KL sums accumulated over counts and normalized once, so the
    // disjoint-support case comes out exactly 1.0
    let mut kl_p = 0.0f64;
    let mut kl_q = 0.0f64;
    for k in &keys {
        let ca = ga.counts.get(k).copied().unwrap_or(0) as f64;
        let cb = gb.counts.get(k).copied().unwrap_or(0) as f64;
        let p = ca / na;
        let q = cb / nb;
        let m = 0.5 * (p + q);
        if ca > 0.0 {
            kl_p += ca * (p / m).log2();
        }
        if cb > 0.0 {
            kl_q += cb * (q / m).log2();
        }
    }
    let jsd = 0.5 * (kl_p / na) + 0.5 * (kl_q / nb);
    Ok(jsd.clamp(0.0, 1.0))
}

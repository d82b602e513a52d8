//! Exact nearest-neighbour distance: brute force for small clouds, a
//! static kd-tree above [`BRUTE_FORCE_LIMIT`] points.

/// Clouds with at most this many points are scanned linearly.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn brute_force_min(z: &[f64], points: &[f64], dim: usize) -> f64 {
    points
        .chunks_exact(dim)
        .map(|p| sq_dist(z, p))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[derive(Clone, Debug)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static kd-tree over a flat row-major point buffer.
#[derive(Clone, Debug)]
pub struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [f64], dim: usize) -> Self {
        let mut idx: Vec<usize> = (0..points.len() / dim).collect();
        let mut tree = KdTree {
            points,
            dim,
            nodes: Vec::with_capacity(idx.len()),
            root: None,
        };
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn coord(&self, i: usize, axis: usize) -> f64 {
        self.points[i * self.dim + axis]
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % self.dim;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| self.coord(a, axis).total_cmp(&self.coord(b, axis)));
        let point = idx[mid];
        let slot = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        Some(slot)
    }

    /// Exact distance from `z` to the nearest stored point.
    pub fn nearest_distance(&self, z: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, z, &mut best);
        best.sqrt()
    }

    fn search(&self, node: Option<usize>, z: &[f64], best: &mut f64) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.point * self.dim..(node.point + 1) * self.dim];
        let d = sq_dist(z, p);
        if d < *best {
            *best = d;
        }
        let delta = z[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, z, best);
        if delta * delta <= *best {
            self.search(far, z, best);
        }
    }
}

//! Exact nearest-neighbor queries over 3D points via a balanced k-d tree.
//!
//! Built once, queried many times; queries prune by splitting-plane
//! distance and are exact (no approximation).

/// Balanced static k-d tree. Nodes are stored in build order; each node
/// splits on the axis of largest spread of its range.
pub struct KdTree {
    nodes: Vec<Node>,
    root: Option<u32>,
}

struct Node {
    point: [f64; 3],
    /// Index into the original point array.
    payload: u32,
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut items: Vec<(u32, [f64; 3])> =
            points.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_range(&mut items, &mut nodes);
        KdTree { nodes, root }
    }

    fn build_range(items: &mut [(u32, [f64; 3])], nodes: &mut Vec<Node>) -> Option<u32> {
        if items.is_empty() {
            return None;
        }
        // split on the widest axis of this range
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (_, p) in items.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |x, y| x.1[axis].total_cmp(&y.1[axis]));
        let (id, point) = items[mid];
        let slot = nodes.len() as u32;
        nodes.push(Node {
            point,
            payload: id,
            axis: axis as u8,
            left: None,
            right: None,
        });
        let (before, rest) = items.split_at_mut(mid);
        let left = Self::build_range(before, nodes);
        let right = Self::build_range(&mut rest[1..], nodes);
        nodes[slot as usize].left = left;
        nodes[slot as usize].right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index and distance of the nearest stored point, or `None` if empty.
    pub fn nearest(&self, q: [f64; 3]) -> Option<(usize, f64)> {
        let root = self.root?;
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(root, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, slot: u32, q: [f64; 3], best: &mut (usize, f64)) {
        let node = &self.nodes[slot as usize];
        let d2 = dist_sq(node.point, q);
        if d2 < best.1 {
            *best = (node.payload as usize, d2);
        }
        let axis = node.axis as usize;
        let delta = q[axis] - node.point[axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, q, best);
        }
        if let Some(f) = far {
            if delta * delta < best.1 {
                self.search(f, q, best);
            }
        }
    }
}

#[inline]
fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [1usize, 2, 3, 17, 200, 1000] {
            let points: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random::<f64>() * 10.0 - 5.0))
                .collect();
            let tree = KdTree::build(&points);
            for _ in 0..200 {
                let q: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 12.0 - 6.0);
                let (idx, dist) = tree.nearest(q).unwrap();
                let (bi, bd) = points
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (i, dist_sq(p, q)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                assert!((dist - bd.sqrt()).abs() < 1e-12);
                // ties may resolve to another equally-near point
                assert!((dist_sq(points[idx], q).sqrt() - dist_sq(points[bi], q).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build(&[]);
        assert!(tree.nearest([0.0; 3]).is_none());
        assert!(tree.is_empty());
    }

    #[test]
    fn exact_on_stored_points() {
        let points = vec![[1.0, 2.0, 3.0], [-4.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        let tree = KdTree::build(&points);
        for (i, &p) in points.iter().enumerate() {
            let (idx, d) = tree.nearest(p).unwrap();
            assert_eq!(idx, i);
            assert_eq!(d, 0.0);
        }
    }
}

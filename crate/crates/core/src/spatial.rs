//! Static 3-d tree for exact nearest-neighbour queries.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance, evaluated in a fixed order so that every
/// caller (tree or brute force) produces bit-identical values.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> KdTree {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            let n = tree.points.len();
            tree.build_node(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.points[start..end];
        let (lo, hi) = slice
            .iter()
            .fold((slice[0], slice[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let ext = hi - lo;
        let axis = ext.imax();
        let mid = (end - start) / 2;
        self.points[start..end].select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let value = self.points[start + mid][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Smallest squared distance from `q` to any stored point.
    pub fn nearest_dist2(&self, q: &Vec3) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for p in &self.points[start..end] {
                    let d = dist2(p, q);
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates ≤ value, right ≥ value
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

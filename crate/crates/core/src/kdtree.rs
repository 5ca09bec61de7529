//! Balanced 3-d tree for exact nearest-neighbour queries over a fixed set.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Nearest-neighbour index. Ties are broken toward the smallest point index,
/// so answers match a brute-force scan exactly.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdIndex {
    pub fn build(points: &[Vec3]) -> Self {
        let mut idx = KdIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            idx.build_node(0, points.len());
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (self.points[self.order[start]], self.points[self.order[start]]);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |a, b| pts[*a][axis].total_cmp(&pts[*b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// `(index, squared distance)` of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates reachable for tie-breaking.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

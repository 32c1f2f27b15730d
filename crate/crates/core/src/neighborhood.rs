//! Exact K-nearest-neighbor search over anchor positions.
//!
//! Neighbors are ordered by ascending squared distance with ties broken by
//! lower anchor index. The center is never its own neighbor.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub center: usize,
    pub indices: Vec<usize>,
    pub dist2: Vec<f64>,
    /// `p_j - p_center` per neighbor.
    pub offsets: Vec<Vector3<f64>>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable axis-aligned splitting tree.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

#[inline]
fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Vector3<f64>], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidConfig("non-finite anchor position".into()));
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size: leaf_size.max(1),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (self.points[self.order[start]], self.points[self.order[start]]);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] == 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        self.points[i]
    }

    /// The `k` nearest indexed points to `query`, skipping `exclude`.
    /// Returns `(index, squared distance)` sorted by distance then index.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2)).collect()
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate { d2: dist2(&self.points[i], q), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // Equal plane distance may still hide a lower-index tie.
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Exact neighbors of indexed point `center`, at most `len - 1`.
    pub fn knn(&self, center: usize, k: usize) -> NeighborSet {
        let c = self.points[center];
        let hits = self.nearest(&c, k.min(self.len() - 1), Some(center));
        NeighborSet {
            center,
            offsets: hits.iter().map(|&(i, _)| self.points[i] - c).collect(),
            dist2: hits.iter().map(|&(_, d)| d).collect(),
            indices: hits.into_iter().map(|(i, _)| i).collect(),
        }
    }
}

/// Exhaustive-scan reference with the same ordering rule as [`SpatialIndex::knn`].
pub fn brute_force_knn(points: &[Vector3<f64>], center: usize, k: usize) -> NeighborSet {
    let c = points[center];
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(i, p)| Candidate { d2: dist2(p, &c), index: i })
        .collect();
    all.sort();
    all.truncate(k);
    NeighborSet {
        center,
        offsets: all.iter().map(|h| points[h.index] - c).collect(),
        dist2: all.iter().map(|h| h.d2).collect(),
        indices: all.into_iter().map(|h| h.index).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(SpatialIndex::build(&[]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn single_point() {
        let idx = SpatialIndex::build(&[Vector3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(idx.leaf_count(), 1);
        assert!(idx.knn(0, 5).is_empty());
    }

    #[test]
    fn collinear_tie_break() {
        let pts = [Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let idx = SpatialIndex::build(&pts).unwrap();
        let n = idx.knn(1, 2);
        assert_eq!(n.indices, vec![0, 2]);
        assert_eq!(idx.knn(1, 1).indices, vec![0]);
        assert_eq!(n, brute_force_knn(&pts, 1, 2));
    }

    #[test]
    fn k_zero_and_clipping() {
        let pts = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let idx = SpatialIndex::build(&pts).unwrap();
        assert!(idx.knn(0, 0).is_empty());
        assert_eq!(idx.knn(0, 5).indices, vec![1]);
        assert_eq!(brute_force_knn(&pts, 0, 5).indices, vec![1]);
    }

    #[test]
    fn duplicates_come_first_in_index_order() {
        let pts = [
            Vector3::zeros(),
            Vector3::new(5.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let idx = SpatialIndex::with_leaf_size(&pts, 1).unwrap();
        let n = idx.knn(0, 3);
        assert_eq!(n.indices, vec![2, 3, 1]);
        assert_eq!(n.offsets[0], n.offsets[1]);
    }

    #[test]
    fn all_coincident_points() {
        let pts = vec![Vector3::new(0.5, 0.5, 0.5); 40];
        let idx = SpatialIndex::build(&pts).unwrap();
        assert_eq!(idx.knn(7, 3).indices, vec![0, 1, 2]);
    }
}

//! Exact k-nearest-neighbor search over a static 3D point cloud.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

/// Ordered point set; the unit of input for index construction and normal estimation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl From<Vec<Vec3>> for PointCloud {
    fn from(points: Vec<Vec3>) -> Self {
        Self::new(points)
    }
}

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Immutable kd-tree. Ties in distance are broken by the lower point index.
#[derive(Debug)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    root: Node,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn build_index(cloud: &PointCloud) -> Result<SpatialIndex> {
    SpatialIndex::build(cloud)
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let points = cloud.points.clone();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let n = order.len();
        let root = Self::build_node(&points, &mut order, 0, n);
        Ok(Self { points, order, root })
    }

    fn build_node(points: &[Vec3], order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            return Node::Leaf { start, end };
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[slice[mid]][axis];
        let left = Self::build_node(points, order, start, start + mid);
        let right = Self::build_node(points, order, start + mid, end);
        Node::Split {
            axis,
            value,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vec3 {
        &self.points[index]
    }

    /// Indices of the `k` nearest points, ascending by distance.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        found.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: &Node, query: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &index in &self.order[*start..*end] {
                    let cand = Candidate {
                        dist2: (self.points[index] - query).norm_squared(),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if heap.peek().is_some_and(|worst| cand < *worst) {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // `<=` keeps equal-distance points on the far side reachable for tie-breaking
                let visit_far = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.dist2);
                if visit_far {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

pub fn knn(index: &SpatialIndex, query: &Vec3, k: usize) -> Vec<usize> {
    index.knn(query, k)
}

#[cfg(test)]
pub(crate) fn brute_force_knn(points: &[Vec3], query: &Vec3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

//! Exact nearest-neighbor search over 3D points.
//!
//! The tree is stored implicitly: points are permuted so that every subtree
//! occupies a contiguous slice, split at its median along the axis of largest
//! spread. Leaves hold up to [`LEAF_SIZE`] points.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
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

/// Balanced 3-d tree answering exact nearest and k-nearest queries.
#[derive(Clone, Debug)]
pub struct KdIndex {
    points: Vec<Vec3>,
    // Original index of each permuted point.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Result of a nearest-neighbor query: index into the indexed slice and
/// squared Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then_with(|| self.1.cmp(&other.1))
    }
}

impl KdIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("cannot index an empty point set"));
        }
        let mut idx = KdIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        idx.build_node(0, points.len());
        Ok(idx)
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
        let mut lo = self.points[start];
        let mut hi = lo;
        for p in &self.points[start..end] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;

        let mut pairs: Vec<(Vec3, usize)> = self.points[start..end]
            .iter()
            .copied()
            .zip(self.order[start..end].iter().copied())
            .collect();
        pairs.select_nth_unstable_by(mid - start, |a, b| a.0[axis].total_cmp(&b.0[axis]));
        for (k, (p, o)) in pairs.into_iter().enumerate() {
            self.points[start + k] = p;
            self.order[start + k] = o;
        }
        let value = self.points[mid][axis];

        self.nodes.push(Node::Leaf { start, end: start });
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

    /// Exact nearest neighbor of `query`.
    pub fn nearest(&self, query: &Vec3) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        self.nearest_in(0, query, &mut best);
        best
    }

    fn nearest_in(&self, node: usize, q: &Vec3, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for k in start..end {
                    let d = (self.points[k] - q).norm_squared();
                    let o = self.order[k];
                    // Ties go to the lowest original index, matching a linear scan.
                    if d < best.dist_sq || (d == best.dist_sq && o < best.index) {
                        *best = Neighbor {
                            index: o,
                            dist_sq: d,
                        };
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                if diff * diff <= best.dist_sq {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest neighbors of `query`, closest first.
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_in(0, query, k, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .into_iter()
            .map(|HeapItem(d, i)| Neighbor {
                index: i,
                dist_sq: d,
            })
            .collect();
        out.sort_by(|a, b| a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index)));
        out
    }

    fn knn_in(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let item = HeapItem((self.points[i] - q).norm_squared(), self.order[i]);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(item);
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_in(near, q, k, heap);
                let bound = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().map_or(f64::INFINITY, |h| h.0)
                };
                if diff * diff <= bound {
                    self.knn_in(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &[Vec3], q: &Vec3) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.dist_sq {
                best = Neighbor {
                    index: i,
                    dist_sq: d,
                };
            }
        }
        best
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect()
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(matches!(KdIndex::build(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn single_point() {
        let idx = KdIndex::build(&[Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        let n = idx.nearest(&Vec3::zeros());
        assert_eq!(n.index, 0);
        assert_eq!(n.dist_sq, 14.0);
    }

    #[test]
    fn self_query_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 500);
        let idx = KdIndex::build(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let n = idx.nearest(p);
            assert_eq!(n.index, i);
            assert_eq!(n.dist_sq, 0.0);
        }
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 1000);
        let idx = KdIndex::build(&pts).unwrap();
        for q in random_points(&mut rng, 100) {
            assert_eq!(idx.nearest(&q), linear_scan(&pts, &q));
        }
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 700);
        let idx = KdIndex::build(&pts).unwrap();
        for q in random_points(&mut rng, 50) {
            let mut all: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm_squared(), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = idx.k_nearest(&q, 10);
            let want: Vec<usize> = all[..10].iter().map(|x| x.1).collect();
            assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![Vec3::x(); 20];
        let idx = KdIndex::build(&pts).unwrap();
        assert_eq!(idx.nearest(&Vec3::zeros()).index, 0);
    }
}

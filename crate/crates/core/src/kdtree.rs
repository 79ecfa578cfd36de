//! Exact Euclidean nearest-neighbor search with a median-split K-D tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
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

/// Balanced tree over points with caller-supplied ids. Axes cycle with depth.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    ids: Vec<usize>,
    root: Node,
}

/// A neighbor with its Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub distance: f64,
}

/// Max-heap entry ordered by (squared distance, id).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    /// Builds a tree over `points`; point `i` gets id `ids[i]`.
    pub fn build(points: &[Vec<f64>], ids: &[usize]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid(
                "cannot build a K-D tree over no points".into(),
            ));
        }
        if points.len() != ids.len() {
            return Err(Error::Invalid(format!(
                "{} points with {} ids",
                points.len(),
                ids.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Invalid(
                "points must have at least one dimension".into(),
            ));
        }
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::Invalid(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::split(points, &mut order, 0, 0, dim);
        let flat = order
            .iter()
            .flat_map(|&i| points[i].iter().copied())
            .collect();
        Ok(Self {
            dim,
            points: flat,
            ids: order.iter().map(|&i| ids[i]).collect(),
            root,
        })
    }

    /// Builds over `points` with ids `0..n`.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let ids: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &ids)
    }

    fn split(
        points: &[Vec<f64>],
        order: &mut [usize],
        offset: usize,
        depth: usize,
        dim: usize,
    ) -> Node {
        let n = order.len();
        if n <= LEAF_SIZE {
            return Node::Leaf {
                start: offset,
                end: offset + n,
            };
        }
        let axis = depth % dim;
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[order[mid]][axis];
        let (left, right) = order.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::split(points, left, offset, depth + 1, dim)),
            right: Box::new(Self::split(points, right, offset + mid, depth + 1, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, slot: usize) -> &[f64] {
        &self.points[slot * self.dim..(slot + 1) * self.dim]
    }

    /// The `k` nearest points ordered by (distance, id), skipping ids for
    /// which `exclude` returns true.
    pub fn nearest_filtered(
        &self,
        query: &[f64],
        k: usize,
        exclude: impl Fn(usize) -> bool,
    ) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::Invalid(format!(
                "query of dimension {} for a tree of dimension {}",
                query.len(),
                self.dim
            )));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, &exclude, &mut heap);
        }
        let mut hits: Vec<Candidate> = heap.into_vec();
        hits.sort();
        Ok(hits
            .into_iter()
            .map(|c| Hit {
                id: c.id,
                distance: c.dist2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        self.nearest_filtered(query, k, |_| false)
    }

    fn search(
        &self,
        node: &Node,
        q: &[f64],
        k: usize,
        exclude: &impl Fn(usize) -> bool,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for slot in *start..*end {
                    let id = self.ids[slot];
                    if exclude(id) {
                        continue;
                    }
                    let dist2: f64 = self
                        .point(slot)
                        .iter()
                        .zip(q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let c = Candidate { dist2, id };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, exclude, heap);
                // Points on the far side are at least |diff| away. Equal
                // distances are still visited so id tie-breaks stay exact.
                let worst = heap.peek().map(|c| c.dist2);
                if heap.len() < k || worst.is_some_and(|w| diff * diff <= w) {
                    self.search(far, q, k, exclude, heap);
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

    fn brute(points: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn single_point() {
        let t = KdTree::from_points(&[vec![0.5, -1.0]]).unwrap();
        let hits = t.nearest(&[100.0, 3.0], 1).unwrap();
        assert_eq!(hits[0].id, 0);
    }

    #[test]
    fn matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rng.random_range(0..4) as f64).collect())
            .collect();
        pts.push(pts[0].clone());
        let t = KdTree::from_points(&pts).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
            for k in [1, 5, 17] {
                let got: Vec<usize> = t.nearest(&q, k).unwrap().iter().map(|h| h.id).collect();
                assert_eq!(got, brute(&pts, &q, k));
            }
        }
    }

    #[test]
    fn exclusion_and_errors() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let t = KdTree::from_points(&pts).unwrap();
        let h = t.nearest_filtered(&[0.0], 1, |id| id == 0).unwrap();
        assert_eq!((h[0].id, h[0].distance), (1, 1.0));
        assert!(t.nearest(&[0.0, 1.0], 1).is_err());
        assert!(KdTree::from_points(&[vec![0.0], vec![1.0, 2.0]]).is_err());
        assert!(KdTree::from_points(&[]).is_err());
    }
}

//! Static 3-d tree over a point slice, for nearest-neighbor and k-NN queries.

use nalgebra::Vector3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Permutation of point indices; every subtree is a contiguous range whose
    /// split element sits at the middle of the range.
    order: Vec<usize>,
    /// Split axis, stored at the position of the split element.
    axis: Vec<u8>,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axis: vec![0; points.len()],
        };
        tree.build(0, points.len());
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Index and distance of the closest point, if any lies within `max_dist`.
    pub fn nearest_within(&self, q: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let mut best = Candidate { dist2: max_dist * max_dist, index: usize::MAX };
        self.nearest_rec(q, 0, self.points.len(), &mut best);
        (best.index != usize::MAX).then(|| (best.index, best.dist2.sqrt()))
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    fn nearest_rec(&self, q: &Vector3<f64>, lo: usize, hi: usize, best: &mut Candidate) {
        if hi <= lo {
            return;
        }
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d2 = (self.points[i] - q).norm_squared();
                let c = Candidate { dist2: d2, index: i };
                if d2 <= best.dist2 && (best.index == usize::MAX || c < *best) {
                    *best = c;
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let d2 = (self.points[i] - q).norm_squared();
        let c = Candidate { dist2: d2, index: i };
        if d2 <= best.dist2 && (best.index == usize::MAX || c < *best) {
            *best = c;
        }
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_rec(q, first.0, first.1, best);
        if diff * diff <= best.dist2 {
            self.nearest_rec(q, second.0, second.1, best);
        }
    }

    /// The `k` nearest points sorted by increasing distance, as (index, distance).
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(q, k, 0, self.points.len(), &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    fn offer(&self, q: &Vector3<f64>, i: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let c = Candidate { dist2: (self.points[i] - q).norm_squared(), index: i };
        if heap.len() < k {
            heap.push(c);
        } else if let Some(top) = heap.peek() {
            if c < *top {
                heap.pop();
                heap.push(c);
            }
        }
    }

    fn knn_rec(&self, q: &Vector3<f64>, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate>) {
        if hi <= lo {
            return;
        }
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                self.offer(q, i, k, heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        self.offer(q, i, k, heap);
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_rec(q, k, first.0, first.1, heap);
        let bound = heap.peek().map_or(f64::INFINITY, |c| c.dist2);
        if heap.len() < k || diff * diff <= bound {
            self.knn_rec(q, k, second.0, second.1, heap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let pts = random_points(500, 1);
        let tree = KdTree::new(&pts);
        for q in random_points(100, 2) {
            let mut brute: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm())).collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (ni, nd) = tree.nearest(&q).unwrap();
            assert_eq!(ni, brute[0].0);
            assert!((nd - brute[0].1).abs() < 1e-15);
            let knn = tree.knn(&q, 10);
            let got: Vec<usize> = knn.iter().map(|x| x.0).collect();
            let want: Vec<usize> = brute[..10].iter().map(|x| x.0).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn radius_limit() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let tree = KdTree::new(&pts);
        assert!(tree.nearest_within(&Vector3::new(0.5, 0.6, 0.0), 0.5).is_none());
        assert_eq!(tree.nearest_within(&Vector3::new(0.9, 0.0, 0.0), 0.5).unwrap().0, 1);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vector3::zeros()).is_none());
        assert!(tree.knn(&Vector3::zeros(), 3).is_empty());
    }
}

//! k-nearest-neighbor probability smoother on standardized features.
//!
//! Neighbors are found with an implicit kd-tree: the training points are
//! permuted in place so that every index range `[lo, hi)` is a subtree whose
//! median element splits on axis `depth % dim`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    dim: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Standardized training points in tree order, row-major.
    points: Vec<f64>,
    labels: Vec<f64>,
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

/// Default neighborhood size `ceil(n^0.6)`.
pub fn default_k(n: usize) -> usize {
    ((n as f64).powf(0.6).ceil() as usize).max(1)
}

/// Fit a k-NN smoother. Each feature is centered and scaled to unit standard
/// deviation (constant features are only centered).
pub fn flexible_outcome_fit(rows: &[Vec<f64>], labels: &[bool], k: usize) -> Result<KnnModel> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(invalid("k-NN fit needs matching, nonempty features and labels"));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let n = rows.len() as f64;
    let center: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - center[j]) / scale[j]).collect())
        .collect();
    build(&mut order, &standardized, dim, 0);

    let points = order.iter().flat_map(|&i| standardized[i].iter().copied()).collect();
    let labels = order.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();
    Ok(KnnModel { k: k.min(rows.len()), dim, center, scale, points, labels })
}

fn build(idx: &mut [usize], pts: &[Vec<f64>], dim: usize, depth: usize) {
    if idx.len() <= LEAF_SIZE {
        return;
    }
    let axis = depth % dim;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
    let (left, right) = idx.split_at_mut(mid);
    build(left, pts, dim, depth + 1);
    build(&mut right[1..], pts, dim, depth + 1);
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn dist2(&self, q: &[f64], i: usize) -> f64 {
        self.point(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn offer(&self, heap: &mut BinaryHeap<Candidate>, q: &[f64], i: usize) {
        let c = Candidate { dist2: self.dist2(q, i), index: i };
        if heap.len() < self.k {
            heap.push(c);
        } else if c < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(c);
        }
    }

    fn search(&self, heap: &mut BinaryHeap<Candidate>, q: &[f64], lo: usize, hi: usize, depth: usize) {
        if hi - lo <= LEAF_SIZE {
            for i in lo..hi {
                self.offer(heap, q, i);
            }
            return;
        }
        let axis = depth % self.dim;
        let mid = lo + (hi - lo) / 2;
        self.offer(heap, q, mid);
        let diff = q[axis] - self.point(mid)[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(heap, q, near.0, near.1, depth + 1);
        let worst = heap.peek().map_or(f64::INFINITY, |c| c.dist2);
        if heap.len() < self.k || diff * diff <= worst {
            self.search(heap, q, far.0, far.1, depth + 1);
        }
    }

    /// Indices (in tree order) and squared distances of the `k` nearest
    /// training points, nearest first.
    fn neighbors(&self, features: &[f64]) -> Vec<Candidate> {
        let q: Vec<f64> = features.iter().enumerate().map(|(j, v)| (v - self.center[j]) / self.scale[j]).collect();
        let mut heap = BinaryHeap::with_capacity(self.k + 1);
        self.search(&mut heap, &q, 0, self.len(), 0);
        heap.into_sorted_vec()
    }

    /// Fraction of positive labels among the `k` nearest training points.
    pub fn predict(&self, features: &[f64]) -> f64 {
        debug_assert_eq!(features.len(), self.dim);
        let nb = self.neighbors(features);
        nb.iter().map(|c| self.labels[c.index]).sum::<f64>() / nb.len() as f64
    }
}

//! Exact k-nearest-neighbour appearance model over filter-bank features.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::FeatureVolume;
use crate::volume::{LabelMap, Volume};

pub const DEFAULT_K: usize = 20;

/// Smallest share either class keeps in the appearance likelihood.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// kd-tree over a flat `n × dim` point array. Points are identified by
/// their insertion index.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    /// Points in `order`, so leaves are contiguous.
    packed: Vec<f64>,
    nodes: Vec<Node>,
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

impl KdTree {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::InvalidInput("point array is not a multiple of the dimension".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let n = points.len() / dim;
        let mut tree = Self { dim, points, order: (0..n).collect(), packed: Vec::new(), nodes: Vec::new() };
        if n > 0 {
            tree.build(0, n);
        }
        tree.packed = tree.order.iter().flat_map(|&i| tree.point(i).iter().copied()).collect();
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for d in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &i| {
                let v = self.points[i * self.dim + d];
                (l.min(v), h.max(v))
            });
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let dim = best.0;
        if best.1 <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let (pts, d) = (&self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a * d + dim].total_cmp(&pts[b * d + dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] * self.dim + dim];
        self.nodes.push(Node::Split { dim, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    /// The `k` nearest points as `(squared distance, insertion index)`,
    /// ascending, ties broken by insertion index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
        if query.len() != self.dim {
            return Err(Error::InvalidInput("query dimension mismatch".into()));
        }
        if k == 0 || k > self.len() {
            return Err(Error::InvalidInput(format!("k = {k} outside 1..={}", self.len())));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut off = vec![0.0; self.dim];
        self.search(0, query, k, 0.0, &mut off, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.d2, c.index)).collect())
    }

    /// `rd` is the squared distance from `q` to the node's cell as far as
    /// the splits recorded in `off` tell.
    fn search(&self, node: usize, q: &[f64], k: usize, rd: f64, off: &mut [f64], heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let worst = if heap.len() < k { f64::INFINITY } else { heap.peek().expect("non-empty heap").d2 };
                    let p = &self.packed[slot * self.dim..(slot + 1) * self.dim];
                    let mut d2 = 0.0;
                    for (a, b) in p.iter().zip(q) {
                        d2 += (a - b) * (a - b);
                        if d2 > worst {
                            break;
                        }
                    }
                    if d2 > worst {
                        continue;
                    }
                    let c = Candidate { d2, index: self.order[slot] };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, rd, off, heap);
                let old = off[dim];
                let far_rd = rd - old * old + diff * diff;
                if heap.len() < k || far_rd <= heap.peek().expect("non-empty heap").d2 {
                    off[dim] = diff;
                    self.search(far, q, k, far_rd, off, heap);
                    off[dim] = old;
                }
            }
        }
    }
}

/// Training points with binary labels and per-class weights.
#[derive(Debug, Clone)]
pub struct KnnModel {
    tree: KdTree,
    labels: Vec<bool>,
    counts: [usize; 2],
    weights: [f64; 2],
    k: usize,
}

impl KnnModel {
    /// Model over explicit points with inverse class-frequency weights
    /// `N / (2 N_l)`. `k` is clamped to the number of points.
    pub fn from_points(dim: usize, points: Vec<f64>, labels: Vec<bool>, k: usize) -> Result<Self> {
        let n1 = labels.iter().filter(|&&l| l).count();
        let counts = [labels.len() - n1, n1];
        for (l, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::EmptyClass(l as u8));
            }
        }
        let n = labels.len() as f64;
        let weights = [n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)];
        Self::with_weights(dim, points, labels, k, weights)
    }

    /// Model with caller-supplied class weights.
    pub fn with_weights(dim: usize, points: Vec<f64>, labels: Vec<bool>, k: usize, weights: [f64; 2]) -> Result<Self> {
        let tree = KdTree::new(dim, points)?;
        if tree.len() != labels.len() {
            return Err(Error::InvalidInput("label count does not match point count".into()));
        }
        if tree.is_empty() {
            return Err(Error::InvalidInput("no training points".into()));
        }
        if k == 0 {
            return Err(Error::InvalidInput("k must be positive".into()));
        }
        let n1 = labels.iter().filter(|&&l| l).count();
        let counts = [labels.len() - n1, n1];
        let k = k.min(tree.len());
        Ok(Self { tree, labels, counts, weights, k })
    }

    /// Admits every voxel of `domain` from each (features, labels) pair, in
    /// atlas order then voxel order.
    pub fn build(features: &[&FeatureVolume], labels: &[&LabelMap], domain: &LabelMap, k: usize) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::InvalidInput("need one label map per feature volume".into()));
        }
        let dim = features[0].dimension();
        let admitted: Vec<usize> = (0..domain.data().len()).filter(|&i| domain.data()[i]).collect();
        if admitted.is_empty() {
            return Err(Error::InvalidInput("training domain is empty".into()));
        }
        let mut points = Vec::with_capacity(admitted.len() * features.len() * dim);
        let mut lab = Vec::with_capacity(admitted.len() * features.len());
        for (fv, lm) in features.iter().zip(labels) {
            fv.geometry().ensure_same(domain.geometry(), "training features")?;
            lm.geometry().ensure_same(domain.geometry(), "training labels")?;
            if fv.dimension() != dim {
                return Err(Error::InvalidInput("feature dimensions differ between atlases".into()));
            }
            for &i in &admitted {
                points.extend_from_slice(fv.vector(i));
                lab.push(lm.data()[i]);
            }
        }
        Self::from_points(dim, points, lab, k)
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_counts(&self) -> [usize; 2] {
        self.counts
    }

    pub fn class_weights(&self) -> [f64; 2] {
        self.weights
    }

    /// Exact `k` nearest neighbours as `(squared distance, label)`.
    pub fn query_knn(&self, f: &[f64], k: usize) -> Result<Vec<(f64, bool)>> {
        Ok(self.tree.nearest(f, k)?.into_iter().map(|(d2, i)| (d2, self.labels[i])).collect())
    }

    /// Normalized `(p(f | background), p(f | foreground))`.
    ///
    /// Each neighbour contributes its class weight times `exp(-d²)`; all
    /// distances are taken relative to the nearest one, which cancels in the
    /// normalization.
    pub fn image_likelihood(&self, f: &[f64]) -> Result<[f64; 2]> {
        let nn = self.query_knn(f, self.k)?;
        let dmin = nn[0].0;
        let mut s = [0.0; 2];
        for &(d2, l) in &nn {
            s[l as usize] += self.weights[l as usize] * (-(d2 - dmin)).exp();
        }
        // a class that is absent or vanishingly far keeps a floor share, so
        // neither probability rounds to 0 or 1
        let z = s[0] + s[1];
        let p1 = (s[1] / z).clamp(LIKELIHOOD_FLOOR, 1.0 - LIKELIHOOD_FLOOR);
        Ok([1.0 - p1, p1])
    }

    /// Foreground likelihood at every voxel of `mask`; other voxels get 0.5.
    pub fn foreground_likelihood(&self, fv: &FeatureVolume, mask: &LabelMap) -> Result<Volume> {
        fv.geometry().ensure_same(mask.geometry(), "likelihood mask")?;
        let vals = (0..mask.data().len())
            .into_par_iter()
            .map(|i| if mask.data()[i] { self.image_likelihood(fv.vector(i)).map(|p| p[1]) } else { Ok(0.5) })
            .collect::<Result<Vec<f64>>>()?;
        Volume::new(*mask.geometry(), vals)
    }
}

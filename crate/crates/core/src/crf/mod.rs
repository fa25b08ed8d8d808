//! Binary CRF over the uncertain voxels: unary terms from appearance
//! likelihood and label prior, contrast-sensitive Potts pairwise terms,
//! solved exactly by min-cut.

pub mod maxflow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::gradient_magnitude;
use crate::volume::{Geometry, LabelMap, Volume};

pub use maxflow::Graph;

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_C_ISOTROPIC: f64 = 0.6;
pub const DEFAULT_C_ANISOTROPIC: f64 = 0.8;

/// Probabilities entering the unary terms are kept inside
/// `[PROBABILITY_FLOOR, 1 - PROBABILITY_FLOOR]`.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Scale (mm) of the Gaussian derivatives used for the gradient term.
pub const GRADIENT_SCALE_MM: f64 = 1.0;

const MAD_TO_SIGMA: f64 = 1.4826;

/// The c parameter suited to the voxel shape.
pub fn default_c(g: &Geometry) -> f64 {
    if g.anisotropy() > crate::filters::ANISOTROPY_THRESHOLD {
        DEFAULT_C_ANISOTROPIC
    } else {
        DEFAULT_C_ISOTROPIC
    }
}

fn floor_prob(p: f64) -> f64 {
    p.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
}

/// `[ψ(0), ψ(1)]` with `ψ(l) = −ln p(I|l) − ln p(l)`.
pub fn unary_pair(likelihood: [f64; 2], prior_fg: f64) -> [f64; 2] {
    let prior = [1.0 - prior_fg, prior_fg];
    [0, 1].map(|l| -floor_prob(likelihood[l]).ln() - floor_prob(prior[l]).ln())
}

/// Unaries for every voxel given the normalized foreground likelihood and
/// foreground prior volumes.
pub fn unary_potentials(likelihood_fg: &Volume, prior_fg: &Volume) -> Result<Vec<[f64; 2]>> {
    likelihood_fg.geometry().ensure_same(prior_fg.geometry(), "unary inputs")?;
    Ok(likelihood_fg
        .data()
        .iter()
        .zip(prior_fg.data())
        .map(|(&p1, &pr)| unary_pair([1.0 - p1, p1], pr))
        .collect())
}

/// Voxels on the 3D Bresenham line from `a` to `b`, endpoints included.
pub fn bresenham3d(a: [i64; 3], b: [i64; 3]) -> Vec<[i64; 3]> {
    let d = [(b[0] - a[0]).abs(), (b[1] - a[1]).abs(), (b[2] - a[2]).abs()];
    let s = [0, 1, 2].map(|k| (b[k] - a[k]).signum());
    let major = (0..3).max_by_key(|&k| (d[k], std::cmp::Reverse(k))).expect("three axes");
    let (m1, m2) = ((major + 1) % 3, (major + 2) % 3);
    let mut p = a;
    let mut out = vec![p];
    let mut e1 = 2 * d[m1] - d[major];
    let mut e2 = 2 * d[m2] - d[major];
    for _ in 0..d[major] {
        if e1 >= 0 {
            p[m1] += s[m1];
            e1 -= 2 * d[major];
        }
        if e2 >= 0 {
            p[m2] += s[m2];
            e2 -= 2 * d[major];
        }
        e1 += 2 * d[m1];
        e2 += 2 * d[m2];
        p[major] += s[major];
        out.push(p);
    }
    out
}

/// Parameters of the contrast-sensitive pairwise term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastParams {
    pub c: f64,
    /// Robust intensity scale.
    pub sigma: f64,
    /// Gradient normalization.
    pub sigma_g: f64,
}

/// 1.4826 × median absolute deviation; falls back to the standard
/// deviation, then to 1, when the spread vanishes.
pub fn robust_scale(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut dev);
    if mad > 0.0 {
        return MAD_TO_SIGMA * mad;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// Gradient penalty `g = 1 − exp(−|∇I| / σ_G)` per voxel.
pub fn gradient_penalty(grad_mag: &Volume, sigma_g: f64) -> Result<Volume> {
    grad_mag.map(|m| 1.0 - (-m / sigma_g).exp())
}

impl ContrastParams {
    /// Estimates σ and σ_G over all voxels of `vol`.
    pub fn estimate(vol: &Volume, grad_mag: &Volume, c: f64) -> Self {
        let sigma = robust_scale(vol.data());
        let mean_g = grad_mag.data().iter().sum::<f64>() / grad_mag.data().len().max(1) as f64;
        let sigma_g = if mean_g > 0.0 { mean_g } else { 1.0 };
        Self { c, sigma, sigma_g }
    }
}

/// Pairwise weight between voxels `x` and `y` of `vol` given the gradient
/// penalty volume `g`.
pub fn pairwise_beta(vol: &Volume, g: &Volume, x: [usize; 3], y: [usize; 3], p: &ContrastParams) -> f64 {
    let dv = vol.at(x[0], x[1], x[2]) - vol.at(y[0], y[1], y[2]);
    let intensity = 1.0 + (1.0 + dv * dv / (2.0 * p.sigma * p.sigma)).ln();
    let to_i = |c: [usize; 3]| c.map(|v| v as i64);
    let gmax = bresenham3d(to_i(x), to_i(y))
        .into_iter()
        .map(|r| g.at(r[0] as usize, r[1] as usize, r[2] as usize))
        .fold(0.0, f64::max);
    p.c * intensity + (1.0 - p.c) * gmax
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub lambda: f64,
    /// `None` picks the value suited to the voxel shape.
    pub c: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma_g: Option<f64>,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, c: None, sigma: None, sigma_g: None }
    }
}

/// Energy over the uncertain voxels. Certain voxels keep their label and
/// enter through per-node boundary sums.
#[derive(Debug, Clone)]
pub struct CrfModel {
    fixed: LabelMap,
    nodes: Vec<usize>,
    unary: Vec<[f64; 2]>,
    /// Σ β to certain neighbours whose label differs from 0 and from 1.
    boundary: Vec<[f64; 2]>,
    edges: Vec<(usize, usize, f64)>,
    lambda: f64,
    contrast: ContrastParams,
}

const NEIGHBOURS: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

fn offset(g: &Geometry, c: [usize; 3], d: [i64; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as i64 + d[a];
        if v < 0 || v >= g.dims[a] as i64 {
            return None;
        }
        out[a] = v as usize;
    }
    Some(out)
}

impl CrfModel {
    /// Builds the energy. `likelihood_fg` and `prior_fg` give foreground
    /// probabilities; `mask` marks the uncertain voxels; `fixed` supplies the
    /// labels of every other voxel.
    pub fn build(
        likelihood_fg: &Volume,
        prior_fg: &Volume,
        vol: &Volume,
        mask: &LabelMap,
        fixed: &LabelMap,
        params: &CrfParams,
    ) -> Result<Self> {
        let g = *vol.geometry();
        for (what, other) in [
            ("likelihood", likelihood_fg.geometry()),
            ("prior", prior_fg.geometry()),
            ("uncertainty mask", mask.geometry()),
            ("fixed labels", fixed.geometry()),
        ] {
            g.ensure_same(other, what)?;
        }
        if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be non-negative, got {}", params.lambda)));
        }
        let c = params.c.unwrap_or_else(|| default_c(&g));
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!("c must lie in [0, 1], got {c}")));
        }
        let grad = gradient_magnitude(vol, GRADIENT_SCALE_MM)?;
        let mut contrast = ContrastParams::estimate(vol, &grad, c);
        if let Some(s) = params.sigma {
            contrast.sigma = s;
        }
        if let Some(s) = params.sigma_g {
            contrast.sigma_g = s;
        }
        if !(contrast.sigma > 0.0 && contrast.sigma_g > 0.0) {
            return Err(Error::InvalidInput("contrast scales must be positive".into()));
        }
        let penalty = gradient_penalty(&grad, contrast.sigma_g)?;
        Self::assemble(likelihood_fg, prior_fg, vol, &penalty, mask, fixed, params.lambda, contrast)
    }

    /// Builds the energy from a precomputed gradient penalty volume.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        likelihood_fg: &Volume,
        prior_fg: &Volume,
        vol: &Volume,
        penalty: &Volume,
        mask: &LabelMap,
        fixed: &LabelMap,
        lambda: f64,
        contrast: ContrastParams,
    ) -> Result<Self> {
        let g = *vol.geometry();
        g.ensure_same(penalty.geometry(), "gradient penalty")?;
        let nodes: Vec<usize> = (0..g.len()).filter(|&i| mask.data()[i]).collect();
        let mut node_of = vec![usize::MAX; g.len()];
        for (n, &i) in nodes.iter().enumerate() {
            node_of[i] = n;
        }
        let unary: Vec<[f64; 2]> = nodes
            .iter()
            .map(|&i| unary_pair([1.0 - likelihood_fg.data()[i], likelihood_fg.data()[i]], prior_fg.data()[i]))
            .collect();
        let per_node: Vec<([f64; 2], Vec<(usize, usize, f64)>)> = nodes
            .par_iter()
            .enumerate()
            .map(|(n, &i)| {
                let c = g.coords(i);
                let mut boundary = [0.0; 2];
                let mut edges = Vec::new();
                for (k, d) in NEIGHBOURS.iter().enumerate() {
                    let Some(nc) = offset(&g, c, *d) else { continue };
                    let j = g.index(nc[0], nc[1], nc[2]);
                    let beta = pairwise_beta(vol, penalty, c, nc, &contrast);
                    if mask.data()[j] {
                        // forward half of the neighbourhood only
                        if k >= 13 {
                            edges.push((n, node_of[j], beta));
                        }
                    } else {
                        let l = fixed.data()[j] as usize;
                        boundary[1 - l] += beta;
                    }
                }
                (boundary, edges)
            })
            .collect();
        let mut boundary = Vec::with_capacity(nodes.len());
        let mut edges = Vec::new();
        for (b, e) in per_node {
            boundary.push(b);
            edges.extend(e);
        }
        Ok(Self { fixed: fixed.clone(), nodes, unary, boundary, edges, lambda, contrast })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn unaries(&self) -> &[[f64; 2]] {
        &self.unary
    }

    pub fn boundaries(&self) -> &[[f64; 2]] {
        &self.boundary
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn contrast(&self) -> &ContrastParams {
        &self.contrast
    }

    /// Voxel index of each node.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Total of unary and λ-weighted pairwise terms for a node labelling.
    pub fn energy(&self, labels: &[bool]) -> f64 {
        self.unary_energy(labels) + self.lambda * self.pairwise_energy(labels)
    }

    pub fn unary_energy(&self, labels: &[bool]) -> f64 {
        self.unary.iter().zip(labels).map(|(u, &l)| u[l as usize]).sum()
    }

    /// Unweighted pairwise sum (boundary and internal edges).
    pub fn pairwise_energy(&self, labels: &[bool]) -> f64 {
        let b: f64 = self.boundary.iter().zip(labels).map(|(b, &l)| b[l as usize]).sum();
        let e: f64 = self.edges.iter().filter(|(i, j, _)| labels[*i] != labels[*j]).map(|e| e.2).sum();
        b + e
    }

    /// Full-volume label map from node labels and the fixed labels.
    pub fn labels_from(&self, node_labels: &[bool]) -> LabelMap {
        let mut out = self.fixed.clone();
        for (&i, &l) in self.nodes.iter().zip(node_labels) {
            out.data_mut()[i] = l;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfSolution {
    pub labels: LabelMap,
    pub node_labels: Vec<bool>,
    pub energy: f64,
}

/// Global minimizer of the model energy by min-cut.
pub fn min_cut(model: &CrfModel) -> Result<CrfSolution> {
    let n = model.nodes.len();
    let mut graph = Graph::new(n);
    for i in 0..n {
        let e = [0, 1].map(|l| model.unary[i][l] + model.lambda * model.boundary[i][l]);
        let m = e[0].min(e[1]);
        // source side is background: cutting s→i labels i foreground
        graph.add_tweights(i, e[1] - m, e[0] - m)?;
    }
    for &(i, j, beta) in &model.edges {
        let w = model.lambda * beta;
        graph.add_edge(i, j, w, w)?;
    }
    graph.maxflow();
    // ties between equal-energy cuts resolve to background
    let node_labels = graph.sink_side();
    let energy = model.energy(&node_labels);
    Ok(CrfSolution { labels: model.labels_from(&node_labels), node_labels, energy })
}

//! Separable Gaussian-derivative filter banks and feature whitening.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

/// Kernels are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// Base scale (mm) of the steerable bank.
pub const STEERABLE_SCALE_MM: f64 = 2.0;

/// Above this spacing ratio the Gaussian bank is preferred.
pub const ANISOTROPY_THRESHOLD: f64 = 1.3;

/// Sampled 1D Gaussian derivative kernel, applied by correlation:
/// `out[x] = Σ_t taps[t] · in[x + t - radius]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1d {
    pub radius: usize,
    pub taps: Vec<f64>,
}

impl Kernel1d {
    /// Derivative of a Gaussian of width `sigma` voxels, `order` ≤ 3.
    ///
    /// Moments are fixed on the sampled taps so that polynomials up to the
    /// kernel order are differentiated exactly in voxel units.
    pub fn gaussian(sigma: f64, order: u8) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("kernel sigma must be positive, got {sigma}")));
        }
        // three taps cannot carry a third moment without a first one
        let min_radius = if order == 3 { 2 } else { 1 };
        let radius = ((TRUNCATION_SIGMAS * sigma).ceil() as usize).max(min_radius);
        let offsets: Vec<f64> = (0..=2 * radius).map(|t| t as f64 - radius as f64).collect();
        let s2 = sigma * sigma;
        let g: Vec<f64> = offsets.iter().map(|&i| (-i * i / (2.0 * s2)).exp()).collect();
        let moment = |k: &[f64], p: i32| -> f64 { k.iter().zip(&offsets).map(|(w, i)| w * i.powi(p)).sum() };
        let mut taps: Vec<f64> = match order {
            0 => g.clone(),
            1 => g.iter().zip(&offsets).map(|(w, i)| w * i).collect(),
            2 => g.iter().zip(&offsets).map(|(w, i)| w * (i * i / s2 - 1.0)).collect(),
            3 => g.iter().zip(&offsets).map(|(w, i)| w * (i * i * i / s2 - 3.0 * i)).collect(),
            o => return Err(Error::InvalidInput(format!("derivative order {o} not supported"))),
        };
        match order {
            0 => {
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|w| *w /= s);
            }
            1 => {
                let m = moment(&taps, 1);
                taps.iter_mut().for_each(|w| *w /= m);
            }
            2 => {
                let mean = taps.iter().sum::<f64>() / taps.len() as f64;
                taps.iter_mut().for_each(|w| *w -= mean);
                let m = moment(&taps, 2);
                taps.iter_mut().for_each(|w| *w *= 2.0 / m);
            }
            _ => {
                let norm: f64 = offsets.iter().map(|i| i * i).sum();
                let lin = moment(&taps, 1) / norm;
                taps.iter_mut().zip(&offsets).for_each(|(w, i)| *w -= lin * i);
                let m = moment(&taps, 3);
                taps.iter_mut().for_each(|w| *w *= 6.0 / m);
            }
        }
        // exact antisymmetry / symmetry and exact zero sum for derivatives
        let n = taps.len();
        for t in 0..radius {
            let (a, b) = (taps[t], taps[n - 1 - t]);
            if order % 2 == 1 {
                let h = 0.5 * (b - a);
                taps[t] = -h;
                taps[n - 1 - t] = h;
            } else {
                let h = 0.5 * (a + b);
                taps[t] = h;
                taps[n - 1 - t] = h;
            }
        }
        if order % 2 == 1 {
            taps[radius] = 0.0;
        } else if order == 2 {
            let off: f64 = taps.iter().enumerate().filter(|&(t, _)| t != radius).map(|(_, w)| w).sum();
            taps[radius] = -off;
        }
        Ok(Self { radius, taps })
    }
}

/// Half-sample symmetric reflection of `j` into `0..n`.
#[inline]
fn mirror(j: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = j.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

fn correlate_axis(data: &[f64], g: &Geometry, axis: usize, k: &Kernel1d) -> Vec<f64> {
    if k.taps.len() == 1 && k.taps[0] == 1.0 {
        return data.to_vec();
    }
    let dims = g.dims;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis];
    let r = k.radius as isize;
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let pos = (idx / stride) % n;
            let base = idx - pos * stride;
            let p = pos as isize;
            if p >= r && p + r < n as isize {
                let start = idx - k.radius * stride;
                k.taps.iter().enumerate().map(|(t, w)| w * data[start + t * stride]).sum()
            } else {
                k.taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * data[base + mirror(p + t as isize - r, n) * stride])
                    .sum()
            }
        })
        .collect()
}

/// Separable filtering with one kernel per axis.
pub fn separable_filter(vol: &Volume, kernels: &[Kernel1d; 3]) -> Vec<f64> {
    let g = vol.geometry();
    let mut data = correlate_axis(vol.data(), g, 0, &kernels[0]);
    data = correlate_axis(&data, g, 1, &kernels[1]);
    correlate_axis(&data, g, 2, &kernels[2])
}

/// Derivative of order `orders[a]` along each axis, Gaussian-smoothed at
/// `scale_mm`, in physical units (per mm^order).
pub fn gaussian_derivative(vol: &Volume, scale_mm: f64, orders: [u8; 3]) -> Result<Vec<f64>> {
    let g = vol.geometry();
    let mut kernels = Vec::with_capacity(3);
    for a in 0..3 {
        let mut k = Kernel1d::gaussian(scale_mm / g.spacing[a], orders[a])?;
        let unit = g.spacing[a].powi(orders[a] as i32);
        k.taps.iter_mut().for_each(|w| *w /= unit);
        kernels.push(k);
    }
    let kernels: [Kernel1d; 3] = kernels.try_into().expect("three kernels");
    Ok(separable_filter(vol, &kernels))
}

/// Gradient magnitude from first Gaussian derivatives at `scale_mm`.
pub fn gradient_magnitude(vol: &Volume, scale_mm: f64) -> Result<Volume> {
    let gx = gaussian_derivative(vol, scale_mm, [1, 0, 0])?;
    let gy = gaussian_derivative(vol, scale_mm, [0, 1, 0])?;
    let gz = gaussian_derivative(vol, scale_mm, [0, 0, 1])?;
    let mag = gx.iter().zip(&gy).zip(&gz).map(|((x, y), z)| (x * x + y * y + z * z).sqrt()).collect();
    Volume::new(*vol.geometry(), mag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterBankKind {
    Gaussian12,
    Steerable16,
}

impl FilterBankKind {
    /// Gaussian bank for anisotropic voxels, steerable bank otherwise.
    pub fn for_geometry(g: &Geometry) -> Self {
        if g.anisotropy() > ANISOTROPY_THRESHOLD {
            Self::Gaussian12
        } else {
            Self::Steerable16
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            Self::Gaussian12 => 12,
            Self::Steerable16 => 16,
        }
    }
}

impl std::str::FromStr for FilterBankKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian12" | "gaussian" => Ok(Self::Gaussian12),
            "steerable16" | "steerable" => Ok(Self::Steerable16),
            other => Err(Error::Config(format!("unknown filter bank '{other}'"))),
        }
    }
}

/// One feature: a sum of separable derivative terms at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureKernel {
    pub name: String,
    pub scale_mm: f64,
    pub terms: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBankSpec {
    pub kind: FilterBankKind,
    pub kernels: Vec<FeatureKernel>,
}

const AXES: [char; 3] = ['x', 'y', 'z'];

fn derivative_name(orders: [u8; 3]) -> String {
    let mut s = String::from("G");
    for (a, &o) in orders.iter().enumerate() {
        (0..o).for_each(|_| s.push(AXES[a]));
    }
    s
}

impl FilterBankSpec {
    pub fn new(kind: FilterBankKind) -> Self {
        let fk = |name: String, scale_mm: f64, terms: Vec<[u8; 3]>| FeatureKernel { name, scale_mm, terms };
        let kernels = match kind {
            FilterBankKind::Gaussian12 => {
                let mut v = Vec::new();
                for s in [1.0, 2.0, 4.0] {
                    v.push(fk(format!("G({s})"), s, vec![[0, 0, 0]]));
                }
                for s in [2.0, 4.0] {
                    for a in 0..3 {
                        let mut o = [0u8; 3];
                        o[a] = 1;
                        v.push(fk(format!("{}({s})", derivative_name(o)), s, vec![o]));
                    }
                }
                for s in [1.0, 2.0, 4.0] {
                    v.push(fk(format!("LoG({s})"), s, vec![[2, 0, 0], [0, 2, 0], [0, 0, 2]]));
                }
                v
            }
            FilterBankKind::Steerable16 => {
                let s = STEERABLE_SCALE_MM;
                let second = [[2, 0, 0], [0, 2, 0], [0, 0, 2], [1, 1, 0], [1, 0, 1], [0, 1, 1]];
                let mut v: Vec<FeatureKernel> =
                    second.iter().map(|&o| fk(derivative_name(o), s, vec![o])).collect();
                // odd third-order basis, lexicographic in the axis multiset
                for a in 0..3 {
                    for b in a..3 {
                        for c in b..3 {
                            let mut o = [0u8; 3];
                            o[a] += 1;
                            o[b] += 1;
                            o[c] += 1;
                            v.push(fk(derivative_name(o), s, vec![o]));
                        }
                    }
                }
                v
            }
        };
        Self { kind, kernels }
    }

    pub fn dimension(&self) -> usize {
        self.kernels.len()
    }
}

/// Per-component mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `d` feature values per voxel, stored voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    geometry: Geometry,
    dim: usize,
    data: Vec<f64>,
    stats: Option<WhiteningStats>,
    degenerate: Vec<bool>,
}

impl FeatureVolume {
    /// Builds from per-component volumes-worth of data.
    pub fn from_components(geometry: Geometry, components: Vec<Vec<f64>>) -> Result<Self> {
        let dim = components.len();
        if dim == 0 || components.iter().any(|c| c.len() != geometry.len()) {
            return Err(Error::InvalidInput("feature components do not match geometry".into()));
        }
        let n = geometry.len();
        let mut data = vec![0.0; n * dim];
        for (j, comp) in components.iter().enumerate() {
            for (i, &v) in comp.iter().enumerate() {
                data[i * dim + j] = v;
            }
        }
        Ok(Self { geometry, dim, data, stats: None, degenerate: vec![false; dim] })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Feature vector of voxel `idx`.
    #[inline]
    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.dim).copied().collect()
    }

    pub fn stats(&self) -> Option<&WhiteningStats> {
        self.stats.as_ref()
    }

    /// Components zeroed during whitening because they were constant.
    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    /// Mean and population std of each component over `domain` (all voxels
    /// when `None`).
    pub fn compute_stats(&self, domain: Option<&LabelMap>) -> Result<WhiteningStats> {
        if let Some(m) = domain {
            self.geometry.ensure_same(m.geometry(), "whitening domain")?;
        }
        let inside = |i: usize| domain.is_none_or(|m| m.data()[i]);
        let n = (0..self.geometry.len()).filter(|&i| inside(i)).count();
        if n == 0 {
            return Err(Error::InvalidInput("whitening domain is empty".into()));
        }
        let mut mean = vec![0.0; self.dim];
        for i in (0..self.geometry.len()).filter(|&i| inside(i)) {
            mean.iter_mut().zip(self.vector(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; self.dim];
        for i in (0..self.geometry.len()).filter(|&i| inside(i)) {
            var.iter_mut().zip(self.vector(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(WhiteningStats { mean, std })
    }
}

/// Runs a filter bank over a volume.
pub fn apply_bank(vol: &Volume, spec: &FilterBankSpec) -> Result<FeatureVolume> {
    let components = spec
        .kernels
        .iter()
        .map(|k| {
            let mut acc = vec![0.0; vol.geometry().len()];
            for &orders in &k.terms {
                let r = gaussian_derivative(vol, k.scale_mm, orders)?;
                acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureVolume::from_components(*vol.geometry(), components)
}

/// Twelve Gaussian, first-derivative and Laplacian-of-Gaussian responses.
pub fn gaussian_bank(vol: &Volume) -> Result<FeatureVolume> {
    apply_bank(vol, &FilterBankSpec::new(FilterBankKind::Gaussian12))
}

/// Six second-derivative and ten odd third-order responses at the base scale.
pub fn steerable_bank(vol: &Volume) -> Result<FeatureVolume> {
    apply_bank(vol, &FilterBankSpec::new(FilterBankKind::Steerable16))
}

fn is_degenerate(mean: f64, std: f64) -> bool {
    !(std > 1e-12 * (1.0 + mean.abs()))
}

/// Standardizes each component. With `stats = None` the statistics are
/// computed over `domain`; constant components are zeroed and flagged.
pub fn whiten(fv: &FeatureVolume, stats: Option<&WhiteningStats>, domain: Option<&LabelMap>) -> Result<FeatureVolume> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != fv.dim || s.std.len() != fv.dim {
                return Err(Error::InvalidInput("whitening statistics dimension mismatch".into()));
            }
            s.clone()
        }
        None => fv.compute_stats(domain)?,
    };
    let degenerate: Vec<bool> = stats.mean.iter().zip(&stats.std).map(|(&m, &s)| is_degenerate(m, s)).collect();
    let dim = fv.dim;
    let data = fv
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % dim;
            if degenerate[j] {
                0.0
            } else {
                (v - stats.mean[j]) / stats.std[j]
            }
        })
        .collect();
    if degenerate.iter().any(|&d| d) {
        log::debug!("whitening zeroed {} constant feature component(s)", degenerate.iter().filter(|&&d| d).count());
    }
    Ok(FeatureVolume { geometry: fv.geometry, dim, data, stats: Some(stats), degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn interior(g: &Geometry, margin: usize) -> impl Iterator<Item = usize> + '_ {
        interior_axes(g, [margin; 3])
    }

    fn interior_axes(g: &Geometry, margin: [usize; 3]) -> impl Iterator<Item = usize> + '_ {
        (0..g.len()).filter(move |&i| {
            let c = g.coords(i);
            (0..3).all(|a| c[a] >= margin[a] && c[a] + margin[a] < g.dims[a])
        })
    }

    #[test]
    fn kernel_moments() {
        for &sigma in &[0.4, 1.0, 2.0, 3.7] {
            for order in 0..=3u8 {
                let k = Kernel1d::gaussian(sigma, order).unwrap();
                let m = |p: i32| -> f64 {
                    k.taps.iter().enumerate().map(|(t, w)| w * (t as f64 - k.radius as f64).powi(p)).sum()
                };
                match order {
                    0 => assert!((m(0) - 1.0).abs() < 1e-12),
                    1 => {
                        assert!(m(0).abs() < 1e-12);
                        assert!((m(1) - 1.0).abs() < 1e-12);
                    }
                    2 => {
                        assert!(m(0).abs() < 1e-12);
                        assert!(m(1).abs() < 1e-12);
                        assert!((m(2) - 2.0).abs() < 1e-12);
                    }
                    _ => {
                        assert!(m(0).abs() < 1e-12);
                        assert!(m(1).abs() < 1e-12);
                        assert!((m(3) - 6.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn mirror_reflection() {
        let seq: Vec<usize> = (-4..8).map(|j| mirror(j, 4)).collect();
        assert_eq!(seq, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert!((-5..5).all(|j| mirror(j, 1) == 0));
    }

    #[test]
    fn constant_volume() {
        let g = Geometry::new([9, 8, 7], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 4.5);
        let fg = gaussian_bank(&v).unwrap();
        for i in 0..g.len() {
            let f = fg.vector(i);
            assert!(f[..3].iter().all(|x| (x - 4.5).abs() < 1e-12));
            assert!(f[3..].iter().all(|x| x.abs() < 1e-12));
        }
        let fs = steerable_bank(&v).unwrap();
        assert_eq!(fs.dimension(), 16);
        assert!((0..g.len()).all(|i| fs.vector(i).iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn ramp_volume() {
        let g = Geometry::new([30, 5, 5], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |c| g.physical(c)[0]).unwrap();
        let f = gaussian_bank(&v).unwrap();
        for i in interior_axes(&g, [13, 0, 0]) {
            let x = f.vector(i);
            for (j, &e) in [1.0, 0.0, 0.0, 1.0, 0.0, 0.0].iter().enumerate() {
                assert!((x[3 + j] - e).abs() < 1e-9, "component {} = {}", 3 + j, x[3 + j]);
            }
            assert!(x[9..].iter().all(|y| y.abs() < 1e-9));
        }
        let g2 = Geometry::unit([20, 20, 20]);
        let v2 = Volume::from_fn(g2, |c| 0.3 * c[0] as f64 - 1.7 * c[1] as f64 + 2.0 * c[2] as f64).unwrap();
        let s = steerable_bank(&v2).unwrap();
        for i in interior(&g2, 7) {
            assert!(s.vector(i).iter().all(|y| y.abs() < 1e-9));
        }
    }

    #[test]
    fn ramp_in_mm_on_anisotropic_grid() {
        let g = Geometry::new([16, 16, 40], [2.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |c| g.physical(c)[2]).unwrap();
        let gz = gaussian_derivative(&v, 2.0, [0, 0, 1]).unwrap();
        for i in interior_axes(&g, [0, 0, 13]) {
            assert!((gz[i] - 1.0).abs() < 1e-9);
        }
    }

    /// Direct 3D correlation of the quadratic with the separable kernel,
    /// summing every tap explicitly.
    fn brute_force_response(g: &Geometry, f: impl Fn([f64; 3]) -> f64, at: [usize; 3], k: &[Kernel1d; 3]) -> f64 {
        let mut acc = 0.0;
        for (ta, wa) in k[0].taps.iter().enumerate() {
            for (tb, wb) in k[1].taps.iter().enumerate() {
                for (tc, wc) in k[2].taps.iter().enumerate() {
                    let p = [
                        (at[0] + ta) as f64 - k[0].radius as f64,
                        (at[1] + tb) as f64 - k[1].radius as f64,
                        (at[2] + tc) as f64 - k[2].radius as f64,
                    ];
                    acc += wa * wb * wc * f([p[0] * g.spacing[0], p[1] * g.spacing[1], p[2] * g.spacing[2]]);
                }
            }
        }
        acc
    }

    #[test]
    fn quadratic_log_is_two() {
        let g = Geometry::new([40, 6, 6], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |c| (c[0] as f64).powi(2)).unwrap();
        let f = gaussian_bank(&v).unwrap();
        for i in interior_axes(&g, [13, 0, 0]) {
            let x = f.vector(i);
            for j in 9..12 {
                assert!((x[j] - 2.0).abs() < 1e-2, "LoG component {j} = {}", x[j]);
            }
        }
        let centre = [20, 3, 3];
        let mut k: Vec<Kernel1d> = vec![Kernel1d::gaussian(2.0, 2).unwrap()];
        k.push(Kernel1d::gaussian(2.0, 0).unwrap());
        k.push(Kernel1d::gaussian(2.0, 0).unwrap());
        let k: [Kernel1d; 3] = k.try_into().unwrap();
        let oracle = brute_force_response(&g, |p| p[0] * p[0], centre, &k);
        assert!((oracle - 2.0).abs() < 1e-2);
    }

    #[test]
    fn quadratic_steerable() {
        let g = Geometry::unit([24, 24, 24]);
        let v = Volume::from_fn(g, |c| (c[0] as f64).powi(2)).unwrap();
        let f = steerable_bank(&v).unwrap();
        for i in interior(&g, 7) {
            let x = f.vector(i);
            assert!((x[0] - 2.0).abs() < 1e-2);
            assert!(x[1..6].iter().all(|y| y.abs() < 1e-2));
        }
    }

    #[test]
    fn tiny_volume_is_mirror_padded() {
        let g = Geometry::unit([1, 2, 3]);
        let v = Volume::from_fn(g, |c| (c[1] + c[2]) as f64).unwrap();
        let f = gaussian_bank(&v).unwrap();
        assert!((0..g.len()).all(|i| f.vector(i).iter().all(|x| x.is_finite())));
    }

    #[test]
    fn translation_equivariance() {
        let g = Geometry::unit([20, 18, 16]);
        let field = |x: f64, y: f64, z: f64| (x * 0.7).sin() + (y * 0.3).cos() * z * 0.1;
        let a = Volume::from_fn(g, |c| field(c[0] as f64, c[1] as f64, c[2] as f64)).unwrap();
        let b = Volume::from_fn(g, |c| field(c[0] as f64 + 2.0, c[1] as f64 - 1.0, c[2] as f64)).unwrap();
        let fa = steerable_bank(&a).unwrap();
        let fb = steerable_bank(&b).unwrap();
        for i in interior(&g, 8) {
            let [x, y, z] = g.coords(i);
            let j = g.index(x + 2, y - 1, z);
            for (p, q) in fb.vector(i).iter().zip(fa.vector(j)) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bank_selection_and_names() {
        assert_eq!(FilterBankKind::for_geometry(&Geometry::unit([4, 4, 4])), FilterBankKind::Steerable16);
        let aniso = Geometry::new([4, 4, 4], [0.9375, 0.9375, 1.5], [0.0; 3]).unwrap();
        assert_eq!(FilterBankKind::for_geometry(&aniso), FilterBankKind::Gaussian12);
        let names: Vec<String> =
            FilterBankSpec::new(FilterBankKind::Gaussian12).kernels.iter().map(|k| k.name.clone()).collect();
        assert_eq!(
            names,
            [
                "G(1)", "G(2)", "G(4)", "Gx(2)", "Gy(2)", "Gz(2)", "Gx(4)", "Gy(4)", "Gz(4)", "LoG(1)", "LoG(2)",
                "LoG(4)"
            ]
        );
        let s = FilterBankSpec::new(FilterBankKind::Steerable16);
        assert_eq!(s.dimension(), 16);
        assert_eq!(s.kernels[6].name, "Gxxx");
        assert_eq!(s.kernels[15].name, "Gzzz");
    }

    #[test]
    fn whitening_examples() {
        let g = Geometry::unit([2, 1, 1]);
        let fv = FeatureVolume::from_components(g, vec![vec![0.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let w = whiten(&fv, None, None).unwrap();
        assert_eq!(w.component(0), vec![-1.0, 1.0]);
        assert_eq!(w.component(1), vec![0.0, 0.0]);
        assert_eq!(w.degenerate(), &[false, true]);
    }

    #[test]
    fn supplied_stats_are_used() {
        let g = Geometry::unit([3, 1, 1]);
        let fv = FeatureVolume::from_components(g, vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let stats = WhiteningStats { mean: vec![1.0], std: vec![2.0] };
        assert_eq!(whiten(&fv, Some(&stats), None).unwrap().component(0), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn narrow_third_derivative_kernel() {
        let k = Kernel1d::gaussian(0.3, 3).unwrap();
        assert_eq!(k.radius, 2);
        let m = |p: i32| k.taps.iter().enumerate().map(|(t, w)| w * (t as f64 - 2.0).powi(p)).sum::<f64>();
        assert!(k.taps.iter().all(|w| w.is_finite()));
        assert!(m(1).abs() < 1e-12);
        assert!((m(3) - 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn whitened_stats_are_standard(vals in proptest::collection::vec(-50.0f64..50.0, 8..60), shift in -10.0f64..10.0) {
            let n = vals.len();
            let g = Geometry::unit([n, 1, 1]);
            let c2: Vec<f64> = vals.iter().map(|v| 3.0 * v + shift).collect();
            let fv = FeatureVolume::from_components(g, vec![vals.clone(), c2]).unwrap();
            let st = fv.compute_stats(None).unwrap();
            prop_assume!(st.std[0] > 1e-6);
            let w = whiten(&fv, None, None).unwrap();
            let again = w.compute_stats(None).unwrap();
            for j in 0..2 {
                prop_assert!(again.mean[j].abs() < 1e-6);
                prop_assert!((again.std[j] - 1.0).abs() < 1e-3);
            }
            let w2 = whiten(&w, Some(&again), None).unwrap();
            for i in 0..n {
                for (a, b) in w2.vector(i).iter().zip(w.vector(i)) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn derivative_kernels_sum_to_zero(sigma in 0.3f64..6.0, order in 1u8..=3) {
            let k = Kernel1d::gaussian(sigma, order).unwrap();
            prop_assert!(k.taps.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

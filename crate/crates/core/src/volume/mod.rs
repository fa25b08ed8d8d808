//! Volume containers, voxel geometry and label-map set operations.
//!
//! Voxels are stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. Physical coordinates are axis aligned:
//! `p = origin + index * spacing` (millimeters).

mod distance;
mod histogram;
mod transform;

pub use distance::{euclidean_distance_sq, signed_distance, transfer_labels_logodds, SignedDistanceMap};
pub use histogram::{histogram_match, HistogramMapping, DEFAULT_HISTOGRAM_LEVELS};
pub use transform::{
    resample, AffineTransform, DisplacementField, FieldThenAffine, Interpolation, SpatialMapping,
    IDENTITY_MAPPING,
};

use crate::error::{Error, Result};

/// Default number of voxels a region of interest is grown by on each side.
pub const DEFAULT_ROI_MARGIN: usize = 3;

/// Grid size, voxel spacing and placement of a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], [0.0; 3]).expect("unit geometry needs non-zero dims")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn physical(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + ijk[0] as f64 * self.spacing[0],
            self.origin[1] + ijk[1] as f64 * self.spacing[1],
            self.origin[2] + ijk[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Length of the bounding-box diagonal through voxel centers (mm).
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|a| ((self.dims[a] - 1) as f64 * self.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Ratio of the largest to the smallest voxel spacing.
    pub fn anisotropy(&self) -> f64 {
        let max = self.spacing.iter().copied().fold(0.0, f64::max);
        max / self.min_spacing()
    }

    /// Exact comparison used at stage boundaries.
    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }

    /// Geometry of the sub-grid selected by `roi`, placed so that physical
    /// coordinates are preserved.
    pub fn cropped(&self, roi: &RegionOfInterest) -> Result<Geometry> {
        roi.check_within(self)?;
        let origin = self.physical(roi.lo);
        Geometry::new(roi.dims(), self.spacing, origin)
    }
}

/// Scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at voxel {pos}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        Self { geometry, data: vec![value; geometry.len()] }
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..geometry.len()).map(|idx| f(geometry.coords(idx))).collect();
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn crop(&self, roi: &RegionOfInterest) -> Result<Volume> {
        let geometry = self.geometry.cropped(roi)?;
        Ok(Volume { geometry, data: crop_data(&self.geometry, &self.data, roi) })
    }

    /// (min, max) over all voxels.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` voxelwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.geometry, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Binary segmentation: `true` marks the structure of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    geometry: Geometry,
    data: Vec<bool>,
}

// Geometry holds f64 but is never NaN (validated), so Eq is sound.
impl Eq for Geometry {}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "label length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        Self { geometry, data: vec![false; geometry.len()] }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..geometry.len()).map(|idx| f(geometry.coords(idx))).collect();
        Self { geometry, data }
    }

    /// Foreground wherever `vol` is strictly above `threshold`.
    pub fn threshold(vol: &Volume, threshold: f64) -> Self {
        Self { geometry: *vol.geometry(), data: vol.data().iter().map(|&v| v > threshold).collect() }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 0.0 / 1.0 volume with the same geometry.
    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn crop(&self, roi: &RegionOfInterest) -> Result<LabelMap> {
        let geometry = self.geometry.cropped(roi)?;
        Ok(LabelMap { geometry, data: crop_data(&self.geometry, &self.data, roi) })
    }

    /// Writes this (cropped) map back into a larger map at `roi`.
    pub fn paste_into(&self, dest: &mut LabelMap, roi: &RegionOfInterest) -> Result<()> {
        roi.check_within(dest.geometry())?;
        if roi.dims() != self.geometry.dims {
            return Err(Error::GeometryMismatch(format!(
                "paste of {:?} into roi {:?}",
                self.geometry.dims,
                roi.dims()
            )));
        }
        let dg = dest.geometry;
        for k in 0..roi.dims()[2] {
            for j in 0..roi.dims()[1] {
                for i in 0..roi.dims()[0] {
                    let d = dg.index(roi.lo[0] + i, roi.lo[1] + j, roi.lo[2] + k);
                    dest.data[d] = self.data[self.geometry.index(i, j, k)];
                }
            }
        }
        Ok(())
    }

    pub fn and(&self, other: &LabelMap) -> Result<LabelMap> {
        self.geometry.ensure_same(&other.geometry, "and")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Ok(LabelMap { geometry: self.geometry, data })
    }

    pub fn and_not(&self, other: &LabelMap) -> Result<LabelMap> {
        self.geometry.ensure_same(&other.geometry, "and_not")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect();
        Ok(LabelMap { geometry: self.geometry, data })
    }

    /// Binary dilation by `radius` voxels with the 26-connected (cubic) element.
    pub fn dilate(&self, radius: usize) -> LabelMap {
        let mut out = self.clone();
        for axis in 0..3 {
            out = out.dilate_axis(axis, radius);
        }
        out
    }

    fn dilate_axis(&self, axis: usize, radius: usize) -> LabelMap {
        let g = self.geometry;
        let mut data = vec![false; g.len()];
        for (idx, &v) in self.data.iter().enumerate() {
            if !v {
                continue;
            }
            let c = g.coords(idx);
            let lo = c[axis].saturating_sub(radius);
            let hi = (c[axis] + radius).min(g.dims[axis] - 1);
            let mut p = c;
            for t in lo..=hi {
                p[axis] = t;
                data[g.index(p[0], p[1], p[2])] = true;
            }
        }
        LabelMap { geometry: g, data }
    }

    /// Tight bounding box of the foreground, or `None` when empty.
    pub fn bounding_box(&self) -> Option<RegionOfInterest> {
        let g = self.geometry;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &v) in self.data.iter().enumerate() {
            if v {
                any = true;
                let c = g.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some(RegionOfInterest { lo, hi })
    }
}

fn crop_data<T: Copy>(g: &Geometry, data: &[T], roi: &RegionOfInterest) -> Vec<T> {
    let d = roi.dims();
    let mut out = Vec::with_capacity(d[0] * d[1] * d[2]);
    for k in roi.lo[2]..=roi.hi[2] {
        for j in roi.lo[1]..=roi.hi[1] {
            let start = g.index(roi.lo[0], j, k);
            out.extend_from_slice(&data[start..start + d[0]]);
        }
    }
    out
}

/// Inclusive voxel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionOfInterest {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl RegionOfInterest {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(Error::InvalidInput(format!("roi lo {lo:?} > hi {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(g: &Geometry) -> Self {
        Self { lo: [0; 3], hi: [g.dims[0] - 1, g.dims[1] - 1, g.dims[2] - 1] }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0] + 1, self.hi[1] - self.lo[1] + 1, self.hi[2] - self.lo[2] + 1]
    }

    pub fn check_within(&self, g: &Geometry) -> Result<()> {
        if (0..3).any(|a| self.lo[a] > self.hi[a] || self.hi[a] >= g.dims[a]) {
            return Err(Error::InvalidInput(format!(
                "roi {:?}..{:?} outside dims {:?}",
                self.lo, self.hi, g.dims
            )));
        }
        Ok(())
    }

    /// Grows the box by `margin` voxels per side, clamped to `g`.
    pub fn expanded(&self, margin: usize, g: &Geometry) -> Self {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for a in 0..3 {
            lo[a] = lo[a].saturating_sub(margin);
            hi[a] = (hi[a] + margin).min(g.dims[a] - 1);
        }
        Self { lo, hi }
    }

    pub fn union(&self, other: &RegionOfInterest) -> Self {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for a in 0..3 {
            lo[a] = lo[a].min(other.lo[a]);
            hi[a] = hi[a].max(other.hi[a]);
        }
        Self { lo, hi }
    }

    /// Position of this box relative to an enclosing box.
    pub fn relative_to(&self, outer: &RegionOfInterest) -> Result<Self> {
        if (0..3).any(|a| self.lo[a] < outer.lo[a] || self.hi[a] > outer.hi[a]) {
            return Err(Error::InvalidInput(format!("roi {self:?} not inside {outer:?}")));
        }
        Ok(Self {
            lo: [self.lo[0] - outer.lo[0], self.lo[1] - outer.lo[1], self.lo[2] - outer.lo[2]],
            hi: [self.hi[0] - outer.lo[0], self.hi[1] - outer.lo[1], self.hi[2] - outer.lo[2]],
        })
    }
}

/// Box around the foreground of every map, grown by `margin` voxels per side.
pub fn structure_roi(labels: &[&LabelMap], margin: usize) -> Result<RegionOfInterest> {
    let first = labels.first().ok_or_else(|| Error::InvalidInput("no label maps".into()))?;
    let g = *first.geometry();
    let mut roi: Option<RegionOfInterest> = None;
    for l in labels {
        g.ensure_same(l.geometry(), "structure_roi")?;
        if let Some(b) = l.bounding_box() {
            roi = Some(match roi {
                Some(r) => r.union(&b),
                None => b,
            });
        }
    }
    let roi = roi.ok_or_else(|| Error::Degenerate("no foreground in any label map".into()))?;
    Ok(roi.expanded(margin, &g))
}

fn check_stack(labels: &[&LabelMap], what: &str) -> Result<Geometry> {
    let first = labels.first().ok_or_else(|| Error::InvalidInput(format!("{what}: no label maps")))?;
    let g = *first.geometry();
    for l in &labels[1..] {
        g.ensure_same(l.geometry(), what)?;
    }
    Ok(g)
}

/// Per-voxel count of foreground votes.
pub fn vote_counts(labels: &[&LabelMap]) -> Result<Vec<u32>> {
    let g = check_stack(labels, "vote_counts")?;
    let mut counts = vec![0u32; g.len()];
    for l in labels {
        for (c, &v) in counts.iter_mut().zip(l.data()) {
            *c += v as u32;
        }
    }
    Ok(counts)
}

/// Voxelwise OR: the support of all transferred labels.
pub fn union_support(labels: &[&LabelMap]) -> Result<LabelMap> {
    let g = check_stack(labels, "union_support")?;
    let counts = vote_counts(labels)?;
    Ok(LabelMap { geometry: g, data: counts.iter().map(|&c| c > 0).collect() })
}

/// Voxels whose labels are not unanimous across the stack.
pub fn uncertainty_mask(labels: &[&LabelMap]) -> Result<LabelMap> {
    let g = check_stack(labels, "uncertainty_mask")?;
    let n = labels.len() as u32;
    let counts = vote_counts(labels)?;
    Ok(LabelMap { geometry: g, data: counts.iter().map(|&c| c > 0 && c < n).collect() })
}

/// Dice overlap `2|X∩Y| / (|X|+|Y|)`.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "dice")?;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::Degenerate("dice of two empty label maps".into()));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(dims: [usize; 3], on: &[usize]) -> LabelMap {
        let mut m = LabelMap::empty(Geometry::unit(dims));
        for &i in on {
            m.data_mut()[i] = true;
        }
        m
    }

    #[test]
    fn geometry_rejects_bad_spacing() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn volume_rejects_non_finite() {
        let g = Geometry::unit([2, 1, 1]);
        assert!(Volume::new(g, vec![1.0, f64::NAN]).is_err());
        assert!(Volume::new(g, vec![1.0]).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = map([8, 1, 1], &[0, 1, 2, 3]);
        let b = map([8, 1, 1], &[2, 3, 4, 5]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = map([8, 1, 1], &[6, 7]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = map([8, 1, 1], &[]);
        assert!(matches!(dice(&e, &e), Err(Error::Degenerate(_))));
    }

    #[test]
    fn union_and_uncertainty_small_cases() {
        let a = map([4, 1, 1], &[0]);
        let b = map([4, 1, 1], &[3]);
        assert_eq!(union_support(&[&a]).unwrap(), a);
        assert_eq!(union_support(&[&a, &b]).unwrap().count(), 2);
        assert_eq!(uncertainty_mask(&[&a, &a, &a]).unwrap().count(), 0);
        let a2 = map([4, 1, 1], &[0, 2]);
        let m = uncertainty_mask(&[&a, &a2]).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.data()[2]);
    }

    #[test]
    fn crop_full_and_single_voxel() {
        let g = Geometry::new([3, 4, 5], [0.5, 1.0, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume::from_fn(g, |c| (c[0] + 10 * c[1] + 100 * c[2]) as f64).unwrap();
        assert_eq!(v.crop(&RegionOfInterest::full(&g)).unwrap(), v);
        let roi = RegionOfInterest::new([2, 1, 3], [2, 1, 3]).unwrap();
        let c = v.crop(&roi).unwrap();
        assert_eq!(c.geometry().dims, [1, 1, 1]);
        assert_eq!(c.data(), &[312.0]);
        assert_eq!(c.geometry().origin, [2.0, 3.0, 9.0]);
    }

    #[test]
    fn crop_rejects_out_of_range() {
        let g = Geometry::unit([3, 3, 3]);
        let v = Volume::filled(g, 0.0);
        assert!(v.crop(&RegionOfInterest { lo: [0; 3], hi: [3, 0, 0] }).is_err());
    }

    #[test]
    fn structure_roi_expands_and_clamps() {
        let g = Geometry::unit([20, 20, 20]);
        // cube occupying 2..=5 in x, 8..=10 in y, 15..=18 in z
        let cube = LabelMap::from_fn(g, |c| {
            (2..=5).contains(&c[0]) && (8..=10).contains(&c[1]) && (15..=18).contains(&c[2])
        });
        let roi = structure_roi(&[&cube], DEFAULT_ROI_MARGIN).unwrap();
        // bounding-box oracle: lo - 3 and hi + 3, clamped to [0, 19]
        assert_eq!(roi.lo, [0, 5, 12]);
        assert_eq!(roi.hi, [8, 13, 19]);
        let cropped = cube.crop(&roi).unwrap();
        assert_eq!(cropped.geometry().dims, [9, 9, 8]);
        assert_eq!(cropped.count(), cube.count());
    }

    #[test]
    fn dilate_grows_single_voxel_to_cube() {
        let g = Geometry::unit([5, 5, 5]);
        let m = LabelMap::from_fn(g, |c| c == [2, 2, 2]);
        assert_eq!(m.dilate(1).count(), 27);
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn paste_round_trips_crop() {
        let g = Geometry::unit([6, 5, 4]);
        let m = LabelMap::from_fn(g, |c| (c[0] + c[1] + c[2]) % 3 == 0);
        let roi = RegionOfInterest::new([1, 1, 1], [4, 3, 2]).unwrap();
        let mut dest = LabelMap::empty(g);
        m.crop(&roi).unwrap().paste_into(&mut dest, &roi).unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let inside = (0..3).all(|a| c[a] >= roi.lo[a] && c[a] <= roi.hi[a]);
            assert_eq!(dest.data()[idx], inside && m.data()[idx]);
        }
    }
}

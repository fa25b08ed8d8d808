use rayon::prelude::*;

use super::{Geometry, RegionOfInterest, Volume};
use crate::error::{Error, Result};

/// Continuous indices closer than this to an integer are snapped onto it, so
/// grid-aligned sampling reproduces source values bit for bit.
const SNAP_TOL: f64 = 1e-9;

/// Maps physical positions of an output grid into the physical space of a
/// source image.
pub trait SpatialMapping: Sync {
    /// `ijk` is the output voxel index, `p` its physical position.
    fn map_point(&self, ijk: [usize; 3], p: [f64; 3]) -> [f64; 3];

    /// Validates that the mapping can be evaluated on `target`.
    fn check_target(&self, _target: &Geometry) -> Result<()> {
        Ok(())
    }
}

/// The identity mapping.
#[derive(Debug, Clone, Copy)]
pub struct Identity;

pub const IDENTITY_MAPPING: Identity = Identity;

impl SpatialMapping for Identity {
    fn map_point(&self, _ijk: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        p
    }
}

/// Homogeneous 4x4 affine map between physical spaces (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 4]; 4],
}

impl AffineTransform {
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("affine has non-finite entries".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!("affine last row must be 0 0 0 1, got {:?}", m[3])));
        }
        let t = Self { m };
        let scale = m[..3].iter().flat_map(|r| r[..3].iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 || t.det3().abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::NonInvertible);
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self::translation([0.0; 3])
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, t[0]],
                [0.0, 1.0, 0.0, t[1]],
                [0.0, 0.0, 1.0, t[2]],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    fn det3(&self) -> f64 {
        let a = &self.m;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let a = &self.m;
        let det = self.det3();
        if det == 0.0 {
            return Err(Error::NonInvertible);
        }
        let inv_det = 1.0 / det;
        let mut r = [[0.0; 4]; 4];
        r[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
        r[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
        r[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
        r[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
        r[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
        r[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
        r[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
        r[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
        r[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
        for i in 0..3 {
            r[i][3] = -(r[i][0] * a[0][3] + r[i][1] * a[1][3] + r[i][2] * a[2][3]);
        }
        r[3][3] = 1.0;
        Self::new(r)
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &Self) -> Self {
        let (a, b) = (&self.m, &first.m);
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Parses four lines of four whitespace-separated numbers (row-major).
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.len() != 4 {
            return Err(Error::Format(format!("affine file needs 4 rows, found {}", rows.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for (r, line) in rows.iter().enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("affine row {r}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::Format(format!("affine row {r} has {} values", vals.len())));
            }
            m[r].copy_from_slice(&vals);
        }
        Self::new(m)
    }

    pub fn to_text(&self) -> String {
        self.m
            .iter()
            .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

impl SpatialMapping for AffineTransform {
    fn map_point(&self, _ijk: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        self.apply(p)
    }
}

/// Dense displacement field in millimeters: output voxel `ijk` at physical
/// position `p` samples the source at `p + d(ijk)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: Geometry,
    components: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(geometry: Geometry, components: [Vec<f64>; 3]) -> Result<Self> {
        for (a, c) in components.iter().enumerate() {
            if c.len() != geometry.len() {
                return Err(Error::InvalidInput(format!(
                    "displacement component {a} has {} values for {} voxels",
                    c.len(),
                    geometry.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("displacement component {a} not finite")));
            }
        }
        Ok(Self { geometry, components })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn from_volumes(dx: Volume, dy: Volume, dz: Volume) -> Result<Self> {
        let g = *dx.geometry();
        g.ensure_same(dy.geometry(), "displacement dy")?;
        g.ensure_same(dz.geometry(), "displacement dz")?;
        Self::new(g, [dx.into_data(), dy.into_data(), dz.into_data()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn component_volume(&self, axis: usize) -> Volume {
        Volume::new(self.geometry, self.components[axis].clone()).expect("validated field")
    }

    #[inline]
    pub fn displacement(&self, idx: usize) -> [f64; 3] {
        [self.components[0][idx], self.components[1][idx], self.components[2][idx]]
    }

    pub fn crop(&self, roi: &RegionOfInterest) -> Result<Self> {
        let c = |a: usize| -> Result<Vec<f64>> { Ok(self.component_volume(a).crop(roi)?.into_data()) };
        Self::new(self.geometry.cropped(roi)?, [c(0)?, c(1)?, c(2)?])
    }

    /// Root-mean-square displacement magnitude (mm).
    pub fn rms(&self) -> f64 {
        let n = self.geometry.len();
        let ss: f64 = (0..n).map(|i| self.displacement(i).iter().map(|d| d * d).sum::<f64>()).sum();
        (ss / n as f64).sqrt()
    }
}

impl SpatialMapping for DisplacementField {
    fn map_point(&self, ijk: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        let d = self.displacement(self.geometry.index(ijk[0], ijk[1], ijk[2]));
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }

    fn check_target(&self, target: &Geometry) -> Result<()> {
        self.geometry.ensure_same(target, "displacement field vs target grid")
    }
}

/// A displacement field followed by an affine: `p ↦ A(p + d(p))`. Without
/// a field this is the affine alone.
#[derive(Debug, Clone, Copy)]
pub struct FieldThenAffine<'a> {
    pub field: Option<&'a DisplacementField>,
    pub affine: &'a AffineTransform,
}

impl SpatialMapping for FieldThenAffine<'_> {
    fn map_point(&self, ijk: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        match self.field {
            Some(f) => self.affine.apply(f.map_point(ijk, p)),
            None => self.affine.apply(p),
        }
    }

    fn check_target(&self, target: &Geometry) -> Result<()> {
        match self.field {
            Some(f) => f.check_target(target),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Resamples `src` onto `target` through `mapping`. Samples falling outside
/// the source grid take `fill`.
pub fn resample(
    src: &Volume,
    mapping: &dyn SpatialMapping,
    target: &Geometry,
    mode: Interpolation,
    fill: f64,
) -> Result<Volume> {
    mapping.check_target(target)?;
    let sg = *src.geometry();
    let data: Vec<f64> = (0..target.len())
        .into_par_iter()
        .map(|idx| {
            let ijk = target.coords(idx);
            let q = mapping.map_point(ijk, target.physical(ijk));
            let c = sg.continuous_index(q);
            match mode {
                Interpolation::Trilinear => sample_trilinear(src, c),
                Interpolation::Nearest => sample_nearest(src, c),
            }
            .unwrap_or(fill)
        })
        .collect();
    Volume::new(*target, data)
}

/// Snapped continuous index, or `None` when outside `[0, n-1]`.
#[inline]
fn axis_position(c: f64, n: usize) -> Option<(usize, f64)> {
    let r = c.round();
    let c = if (c - r).abs() < SNAP_TOL { r } else { c };
    if !(c >= 0.0 && c <= (n - 1) as f64) {
        return None;
    }
    let i0 = (c.floor() as usize).min(n - 1);
    let t = if i0 == n - 1 { 0.0 } else { c - i0 as f64 };
    Some((i0, t))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

fn sample_trilinear(src: &Volume, c: [f64; 3]) -> Option<f64> {
    let g = src.geometry();
    let (i, tx) = axis_position(c[0], g.dims[0])?;
    let (j, ty) = axis_position(c[1], g.dims[1])?;
    let (k, tz) = axis_position(c[2], g.dims[2])?;
    let i1 = (i + 1).min(g.dims[0] - 1);
    let j1 = (j + 1).min(g.dims[1] - 1);
    let k1 = (k + 1).min(g.dims[2] - 1);
    let row = |jj: usize, kk: usize| {
        if tx == 0.0 {
            src.at(i, jj, kk)
        } else {
            lerp(src.at(i, jj, kk), src.at(i1, jj, kk), tx)
        }
    };
    let plane = |kk: usize| if ty == 0.0 { row(j, kk) } else { lerp(row(j, kk), row(j1, kk), ty) };
    Some(if tz == 0.0 { plane(k) } else { lerp(plane(k), plane(k1), tz) })
}

fn sample_nearest(src: &Volume, c: [f64; 3]) -> Option<f64> {
    let g = src.geometry();
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let r = c[a].round();
        if !(r >= 0.0 && r <= (g.dims[a] - 1) as f64) {
            // tolerate half-voxel overshoot at the border
            if c[a] > -0.5 && c[a] < g.dims[a] as f64 - 0.5 {
                ijk[a] = r.clamp(0.0, (g.dims[a] - 1) as f64) as usize;
                continue;
            }
            return None;
        }
        ijk[a] = r as usize;
    }
    Some(src.at(ijk[0], ijk[1], ijk[2]))
}

//! Exact Euclidean distance transform on anisotropic grids and the
//! signed-distance (LogOdds) label representation.

use super::{resample, Geometry, Interpolation, LabelMap, SpatialMapping, Volume};
use crate::error::{Error, Result};

/// Value given to signed-distance samples that fall outside the source grid.
pub const OUT_OF_BOUNDS_DISTANCE: f64 = -1.0e6;

/// Signed Euclidean distance (mm) to the label boundary, positive inside.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceMap(Volume);

impl SignedDistanceMap {
    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn geometry(&self) -> &Geometry {
        self.0.geometry()
    }
}

/// Squared distance (mm²) from every voxel center to the nearest voxel
/// center where `mask` is set. `f64::INFINITY` everywhere when the mask is
/// empty.
pub fn euclidean_distance_sq(mask: &LabelMap) -> Vec<f64> {
    let g = *mask.geometry();
    let mut d: Vec<f64> = mask.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n_max = *g.dims.iter().max().unwrap();
    let mut line = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    for axis in 0..3 {
        let n = g.dims[axis];
        let stride = match axis {
            0 => 1,
            1 => g.dims[0],
            _ => g.dims[0] * g.dims[1],
        };
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..g.dims[ob] {
            for a in 0..g.dims[oa] {
                let mut start = [0usize; 3];
                start[oa] = a;
                start[ob] = b;
                let base = g.index(start[0], start[1], start[2]);
                for t in 0..n {
                    line[t] = d[base + t * stride];
                }
                lower_envelope(&line[..n], g.spacing[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[base + t * stride] = out[t];
                }
            }
        }
    }
    d
}

/// One pass of the Felzenszwalb–Huttenlocher lower envelope of parabolas,
/// with sample `q` located at `q * w`.
fn lower_envelope(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * w;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + pos(q) * pos(q);
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = (fq - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let dx = pos(q) - pos(v[j]);
        *o = dx * dx + f[v[j]];
    }
}

/// Signed distance map of a binary label.
///
/// Inside voxels hold the distance to the nearest background voxel center
/// minus half the smallest spacing; outside voxels hold minus the distance
/// to the nearest foreground voxel center. The zero level therefore lies
/// strictly between boundary voxel centers and `>= 0` recovers the label.
pub fn signed_distance(lab: &LabelMap) -> Result<SignedDistanceMap> {
    let fg = lab.count();
    if fg == 0 || fg == lab.geometry().len() {
        return Err(Error::Degenerate(
            "signed distance needs both foreground and background voxels".into(),
        ));
    }
    let g = *lab.geometry();
    let to_fg = euclidean_distance_sq(lab);
    let inverted = LabelMap::new(g, lab.data().iter().map(|&b| !b).collect())?;
    let to_bg = euclidean_distance_sq(&inverted);
    let half = 0.5 * g.min_spacing();
    let data = lab
        .data()
        .iter()
        .enumerate()
        .map(|(i, &inside)| if inside { to_bg[i].sqrt() - half } else { -to_fg[i].sqrt() })
        .collect();
    Ok(SignedDistanceMap(Volume::new(g, data)?))
}

/// Transfers a label through `mapping` by trilinear interpolation of its
/// signed distance map followed by thresholding at zero.
pub fn transfer_labels_logodds(
    sdm: &SignedDistanceMap,
    mapping: &dyn SpatialMapping,
    target: &Geometry,
) -> Result<LabelMap> {
    let warped = resample(&sdm.0, mapping, target, Interpolation::Trilinear, OUT_OF_BOUNDS_DISTANCE)?;
    LabelMap::new(*target, warped.data().iter().map(|&v| v >= 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::AffineTransform;

    /// All-pairs distance oracle.
    fn brute_signed(lab: &LabelMap) -> Vec<f64> {
        let g = *lab.geometry();
        let half = 0.5 * g.min_spacing();
        (0..g.len())
            .map(|i| {
                let pi = g.physical(g.coords(i));
                let inside = lab.data()[i];
                let best = (0..g.len())
                    .filter(|&j| lab.data()[j] != inside)
                    .map(|j| {
                        let pj = g.physical(g.coords(j));
                        (0..3).map(|a| (pi[a] - pj[a]).powi(2)).sum::<f64>().sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                if inside {
                    best - half
                } else {
                    -best
                }
            })
            .collect()
    }

    #[test]
    fn single_voxel_neighbours() {
        let g = Geometry::unit([3, 3, 3]);
        let lab = LabelMap::from_fn(g, |c| c == [1, 1, 1]);
        let sdm = signed_distance(&lab).unwrap();
        let v = sdm.volume();
        for n in [[0, 1, 1], [2, 1, 1], [1, 0, 1], [1, 2, 1], [1, 1, 0], [1, 1, 2]] {
            assert_eq!(v.at(n[0], n[1], n[2]), -1.0);
        }
        assert_eq!(v.at(1, 1, 1), 0.5);
    }

    #[test]
    fn anisotropic_spacing_respected() {
        let g = Geometry::new([3, 3, 3], [1.0, 2.0, 1.0], [0.0; 3]).unwrap();
        let lab = LabelMap::from_fn(g, |c| c == [1, 1, 1]);
        let v = signed_distance(&lab).unwrap().into_volume();
        assert_eq!(v.at(1, 0, 1), -2.0);
        assert_eq!(v.at(1, 2, 1), -2.0);
        assert_eq!(v.at(0, 1, 1), -1.0);
    }

    #[test]
    fn cube_center_matches_brute_force() {
        let g = Geometry::unit([5, 5, 5]);
        let lab = LabelMap::from_fn(g, |c| c.iter().all(|&x| (1..=3).contains(&x)));
        let v = signed_distance(&lab).unwrap().into_volume();
        let oracle = brute_signed(&lab);
        // nearest background center is 2 voxels away; minus half a voxel
        assert_eq!(v.at(2, 2, 2), 1.5);
        for (a, b) in v.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_labels_rejected() {
        let g = Geometry::unit([2, 2, 2]);
        assert!(signed_distance(&LabelMap::empty(g)).is_err());
        assert!(signed_distance(&LabelMap::from_fn(g, |_| true)).is_err());
    }

    #[test]
    fn identity_transfer_round_trips() {
        let g = Geometry::new([9, 7, 6], [0.9375, 1.5, 0.9375], [1.0, -2.0, 0.5]).unwrap();
        let lab = LabelMap::from_fn(g, |c| {
            let dx = c[0] as f64 - 4.0;
            let dy = c[1] as f64 - 3.0;
            let dz = c[2] as f64 - 2.5;
            dx * dx / 9.0 + dy * dy / 4.0 + dz * dz / 3.0 < 1.0
        });
        let sdm = signed_distance(&lab).unwrap();
        let back = transfer_labels_logodds(&sdm, &AffineTransform::identity(), &g).unwrap();
        assert_eq!(back, lab);
    }

    #[test]
    fn half_voxel_shift_of_flat_boundary() {
        // 1D profile: foreground for i < 4.
        let g = Geometry::unit([8, 1, 1]);
        let lab = LabelMap::from_fn(g, |c| c[0] < 4);
        let sdm = signed_distance(&lab).unwrap();
        // profile: 3.5 2.5 1.5 0.5 | -1 -2 -3 -4
        assert_eq!(sdm.volume().data()[3], 0.5);
        assert_eq!(sdm.volume().data()[4], -1.0);
        let shifted =
            transfer_labels_logodds(&sdm, &AffineTransform::translation([0.5, 0.0, 0.0]), &g).unwrap();
        // sample at 3.5 interpolates 0.5 and -1 -> -0.25 < 0: boundary moves one voxel
        let fg: Vec<bool> = shifted.data().to_vec();
        assert_eq!(fg, vec![true, true, true, false, false, false, false, false]);
        // a quarter-voxel shift keeps the sample at 3.25 positive (0.125)
        let quarter =
            transfer_labels_logodds(&sdm, &AffineTransform::translation([0.25, 0.0, 0.0]), &g).unwrap();
        assert_eq!(quarter, lab);
    }

    #[test]
    fn out_of_bounds_transfer_is_background() {
        let g = Geometry::unit([4, 4, 4]);
        let lab = LabelMap::from_fn(g, |c| c[0] < 2);
        let sdm = signed_distance(&lab).unwrap();
        let out =
            transfer_labels_logodds(&sdm, &AffineTransform::translation([100.0, 0.0, 0.0]), &g).unwrap();
        assert_eq!(out.count(), 0);
    }

    #[test]
    fn edt_of_empty_mask_is_infinite() {
        let g = Geometry::unit([3, 2, 2]);
        assert!(euclidean_distance_sq(&LabelMap::empty(g)).iter().all(|d| d.is_infinite()));
    }
}

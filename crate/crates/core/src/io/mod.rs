//! File formats: NIfTI-1 and MVOL volumes, affine text files and
//! displacement fields. The format is chosen from the file extension
//! (`.nii` for NIfTI, anything else is read as MVOL).

pub mod mvol;
pub mod nifti;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{AffineTransform, DisplacementField, LabelMap, Volume};

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        let img = nifti::read(path)?;
        if img.components.len() != 1 {
            return Err(Error::Format(format!("{}: expected a scalar image", path.display())));
        }
        Volume::new(img.geometry, img.components.into_iter().next().unwrap())
    } else {
        let (g, data, _) = mvol::read(path)?;
        Volume::new(g, data)
    }
}

/// Reads a label image; every non-zero voxel is foreground.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    read_labels_matching(path, None)
}

/// Reads a label image selecting voxels equal to `value` (or any non-zero
/// voxel when `value` is `None`).
pub fn read_labels_matching(path: &Path, value: Option<f64>) -> Result<LabelMap> {
    let vol = read_volume(path)?;
    let data = vol
        .data()
        .iter()
        .map(|&v| match value {
            Some(t) => (v - t).abs() < 0.5,
            None => v != 0.0,
        })
        .collect();
    LabelMap::new(*vol.geometry(), data)
}

/// Writes intensities as float32.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    if is_nifti(path) {
        nifti::write(path, vol.geometry(), &[vol.data()], nifti::DT_FLOAT32)
    } else {
        mvol::write(path, vol.geometry(), vol.data(), mvol::MvolType::F32)
    }
}

/// Writes labels as uint8 (0/1).
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let v = labels.to_volume();
    if is_nifti(path) {
        nifti::write(path, v.geometry(), &[v.data()], nifti::DT_UINT8)
    } else {
        mvol::write(path, v.geometry(), v.data(), mvol::MvolType::U8)
    }
}

pub fn read_affine(path: &Path) -> Result<AffineTransform> {
    AffineTransform::parse(&fs::read_to_string(path)?)
}

pub fn write_affine(path: &Path, xform: &AffineTransform) -> Result<()> {
    fs::write(path, xform.to_text())?;
    Ok(())
}

/// The three MVOL component files (`<path>.dx`, `.dy`, `.dz`).
pub fn displacement_component_paths(path: &Path) -> [PathBuf; 3] {
    ["dx", "dy", "dz"].map(|s| {
        let mut p = path.as_os_str().to_owned();
        p.push(".");
        p.push(s);
        PathBuf::from(p)
    })
}

/// Reads a displacement field: a vector NIfTI (`dim[5] = 3`) for `.nii`
/// paths, otherwise three MVOL component files.
pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    if is_nifti(path) {
        let img = nifti::read(path)?;
        let [x, y, z]: [Vec<f64>; 3] = img
            .components
            .try_into()
            .map_err(|_| Error::Format(format!("{}: expected 3 displacement components", path.display())))?;
        DisplacementField::new(img.geometry, [x, y, z])
    } else {
        let [px, py, pz] = displacement_component_paths(path);
        DisplacementField::from_volumes(read_volume(&px)?, read_volume(&py)?, read_volume(&pz)?)
    }
}

pub fn write_displacement(path: &Path, field: &DisplacementField) -> Result<()> {
    if is_nifti(path) {
        let comps = [field.component(0), field.component(1), field.component(2)];
        nifti::write(path, field.geometry(), &comps, nifti::DT_FLOAT32)
    } else {
        for (axis, p) in displacement_component_paths(path).iter().enumerate() {
            mvol::write(p, field.geometry(), field.component(axis), mvol::MvolType::F32)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn dispatch_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([4, 3, 2], [1.0, 2.0, 1.0], [5.0, 0.0, -1.0]).unwrap();
        let v = Volume::from_fn(g, |c| (c[0] * c[1] + c[2]) as f64).unwrap();
        let l = LabelMap::from_fn(g, |c| c[0] > 1);
        for ext in ["nii", "mvol"] {
            let vp = dir.path().join(format!("v.{ext}"));
            let lp = dir.path().join(format!("l.{ext}"));
            write_volume(&vp, &v).unwrap();
            write_labels(&lp, &l).unwrap();
            assert_eq!(read_volume(&vp).unwrap(), v);
            assert_eq!(read_labels(&lp).unwrap(), l);
            let fp = dir.path().join(format!("f.{ext}"));
            let f = DisplacementField::new(
                g,
                [v.data().to_vec(), vec![0.5; g.len()], v.data().iter().map(|x| -x).collect()],
            )
            .unwrap();
            write_displacement(&fp, &f).unwrap();
            assert_eq!(read_displacement(&fp).unwrap(), f);
        }
        let ap = dir.path().join("a.txt");
        let a = AffineTransform::translation([1.0, 2.0, 3.0]);
        write_affine(&ap, &a).unwrap();
        assert_eq!(read_affine(&ap).unwrap(), a);
    }

    #[test]
    fn label_value_selection() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::unit([4, 1, 1]);
        let v = Volume::new(g, vec![0.0, 17.0, 53.0, 17.0]).unwrap();
        let p = dir.path().join("multi.nii");
        write_volume(&p, &v).unwrap();
        assert_eq!(read_labels(&p).unwrap().count(), 3);
        assert_eq!(read_labels_matching(&p, Some(17.0)).unwrap().data(), &[false, true, false, true]);
    }
}

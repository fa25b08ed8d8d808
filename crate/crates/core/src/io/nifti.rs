//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Honors `dim`, `datatype` (uint8, int16, float32), `pixdim`, `scl_*` and
//! the translation column of `srow_x/y/z` (falling back to the quaternion
//! offset). Both byte orders are read; files are written little endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Geometry;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const INTENT_DISPVECT: i16 = 1006;

/// Decoded image: one or more scalar components on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub datatype: i16,
    pub components: Vec<Vec<f64>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes::<2>(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.bytes::<4>(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes::<4>(off))
    }
}

pub fn read(path: &Path) -> Result<NiftiImage> {
    let buf = fs::read(path)?;
    decode(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode(buf: &[u8]) -> Result<NiftiImage> {
    if buf.len() >= 2 && buf[0] == 0x1f && buf[1] == 0x8b {
        return Err(Error::Format("compressed NIfTI is not supported".into()));
    }
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
    }
    let le = Reader { buf, big_endian: false };
    let r = if le.i32(0) == HEADER_SIZE as i32 {
        le
    } else {
        let be = Reader { buf, big_endian: true };
        if be.i32(0) != HEADER_SIZE as i32 {
            return Err(Error::Format("sizeof_hdr is not 348".into()));
        }
        be
    };
    if &buf[344..347] != b"n+1" {
        return Err(Error::Format("not a single-file NIfTI-1 image (magic n+1)".into()));
    }
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let extent = |i: usize| if (i as i16) <= ndim { dim[i].max(1) as usize } else { 1 };
    let dims = [extent(1), extent(2), extent(3)];
    if extent(4) != 1 || extent(6) != 1 || extent(7) != 1 {
        return Err(Error::Format("only 3D volumes (optionally with a vector dim[5]) are supported".into()));
    }
    let ncomp = extent(5);
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Format(format!("unsupported datatype {other}"))),
    };
    let spacing = [1, 2, 3].map(|i| {
        let p = r.f32(76 + 4 * i).abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });
    let origin = if r.i16(254) > 0 {
        [r.f32(280 + 12), r.f32(296 + 12), r.f32(312 + 12)].map(|v| v as f64)
    } else if r.i16(252) > 0 {
        [r.f32(268), r.f32(272), r.f32(276)].map(|v| v as f64)
    } else {
        [0.0; 3]
    };
    let geometry = Geometry::new(dims, spacing, origin)?;
    let vox_offset = r.f32(108).max(HEADER_SIZE as f32) as usize;
    let n = geometry.len();
    let needed = vox_offset + n * ncomp * width;
    if buf.len() < needed {
        return Err(Error::Format(format!("truncated data: need {needed} bytes, have {}", buf.len())));
    }
    let (slope, inter) = {
        let s = r.f32(112) as f64;
        let i = r.f32(116) as f64;
        if s != 0.0 && s.is_finite() && i.is_finite() {
            (s, i)
        } else {
            (1.0, 0.0)
        }
    };
    let data_reader = Reader { buf: &buf[vox_offset..], big_endian: r.big_endian };
    let components = (0..ncomp)
        .map(|c| {
            (0..n)
                .map(|v| {
                    let off = (c * n + v) * width;
                    let raw = match datatype {
                        DT_UINT8 => data_reader.buf[off] as f64,
                        DT_INT16 => data_reader.i16(off) as f64,
                        _ => data_reader.f32(off) as f64,
                    };
                    raw * slope + inter
                })
                .collect()
        })
        .collect();
    Ok(NiftiImage { geometry, datatype, components })
}

/// Encodes components as a NIfTI-1 image. One component gives a 3D volume,
/// three give a displacement-vector image (`dim[5] = 3`).
pub fn encode(geometry: &Geometry, components: &[&[f64]], datatype: i16) -> Result<Vec<u8>> {
    let ncomp = components.len();
    if ncomp != 1 && ncomp != 3 {
        return Err(Error::InvalidInput(format!("cannot encode {ncomp} components")));
    }
    if geometry.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidInput("dimension exceeds NIfTI-1 limit".into()));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let mut dim = [1i16; 8];
    dim[0] = if ncomp == 3 { 5 } else { 3 };
    dim[1] = geometry.dims[0] as i16;
    dim[2] = geometry.dims[1] as i16;
    dim[3] = geometry.dims[2] as i16;
    dim[5] = ncomp as i16;
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    if ncomp == 3 {
        put_i16(&mut h, 68, INTENT_DISPVECT);
    }
    let (width, bitpix) = match datatype {
        DT_UINT8 => (1, 8),
        DT_INT16 => (2, 16),
        DT_FLOAT32 => (4, 32),
        other => return Err(Error::InvalidInput(format!("cannot write datatype {other}"))),
    };
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let mut pixdim = [1.0f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = geometry.spacing[a] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // mm
    put_i16(&mut h, 254, 2); // sform: aligned
    for a in 0..3 {
        let row = 280 + 16 * a;
        put_f32(&mut h, row + 4 * a, geometry.spacing[a] as f32);
        put_f32(&mut h, row + 12, geometry.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(geometry.len() * ncomp * width);
    for comp in components {
        if comp.len() != geometry.len() {
            return Err(Error::InvalidInput("component length does not match geometry".into()));
        }
        for &v in comp.iter() {
            match datatype {
                DT_UINT8 => h.push(v.round().clamp(0.0, 255.0) as u8),
                DT_INT16 => h.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
                _ => h.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(h)
}

pub fn write(path: &Path, geometry: &Geometry, components: &[&[f64]], datatype: i16) -> Result<()> {
    fs::write(path, encode(geometry, components, datatype)?)?;
    Ok(())
}

//! "MVOL" raw volume format: a five-line text header followed by
//! little-endian samples in x-fastest order.
//!
//! ```text
//! MVOL1
//! dims nx ny nz
//! spacing sx sy sz
//! origin ox oy oz
//! dtype f32|u8
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvolType {
    F32,
    U8,
}

pub fn encode(geometry: &Geometry, data: &[f64], dtype: MvolType) -> Result<Vec<u8>> {
    if data.len() != geometry.len() {
        return Err(Error::InvalidInput("data length does not match geometry".into()));
    }
    let [nx, ny, nz] = geometry.dims;
    let [sx, sy, sz] = geometry.spacing;
    let [ox, oy, oz] = geometry.origin;
    let tag = match dtype {
        MvolType::F32 => "f32",
        MvolType::U8 => "u8",
    };
    let header = format!(
        "MVOL1\ndims {nx} {ny} {nz}\nspacing {sx:?} {sy:?} {sz:?}\norigin {ox:?} {oy:?} {oz:?}\ndtype {tag}\n"
    );
    let mut out = header.into_bytes();
    match dtype {
        MvolType::F32 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        MvolType::U8 => out.extend(data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
    }
    Ok(out)
}

fn header_numbers<const N: usize, T: std::str::FromStr>(line: &str, key: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Format(format!("expected '{key}' header line, got '{line}'")));
    }
    let vals: Vec<T> = parts
        .map(|p| p.parse::<T>().map_err(|e| Error::Format(format!("{key}: {e}"))))
        .collect::<Result<_>>()?;
    vals.try_into().map_err(|_| Error::Format(format!("{key} needs {N} values")))
}

pub fn decode(buf: &[u8]) -> Result<(Geometry, Vec<f64>, MvolType)> {
    let mut lines = Vec::with_capacity(5);
    let mut pos = 0;
    while lines.len() < 5 {
        let nl = buf[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("MVOL header truncated".into()))?;
        let line = std::str::from_utf8(&buf[pos..pos + nl])
            .map_err(|_| Error::Format("MVOL header is not text".into()))?;
        lines.push(line.trim().to_string());
        pos += nl + 1;
    }
    if lines[0] != "MVOL1" {
        return Err(Error::Format("missing MVOL1 magic".into()));
    }
    let dims: [usize; 3] = header_numbers(&lines[1], "dims")?;
    let spacing: [f64; 3] = header_numbers(&lines[2], "spacing")?;
    let origin: [f64; 3] = header_numbers(&lines[3], "origin")?;
    let dtype = match lines[4].as_str() {
        "dtype f32" => MvolType::F32,
        "dtype u8" => MvolType::U8,
        other => return Err(Error::Format(format!("unknown MVOL dtype line '{other}'"))),
    };
    let geometry = Geometry::new(dims, spacing, origin)?;
    let body = &buf[pos..];
    let n = geometry.len();
    let data = match dtype {
        MvolType::F32 => {
            if body.len() != 4 * n {
                return Err(Error::Format(format!("expected {} data bytes, found {}", 4 * n, body.len())));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        MvolType::U8 => {
            if body.len() != n {
                return Err(Error::Format(format!("expected {n} data bytes, found {}", body.len())));
            }
            body.iter().map(|&b| b as f64).collect()
        }
    };
    Ok((geometry, data, dtype))
}

pub fn read(path: &Path) -> Result<(Geometry, Vec<f64>, MvolType)> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, geometry: &Geometry, data: &[f64], dtype: MvolType) -> Result<()> {
    fs::write(path, encode(geometry, data, dtype)?)?;
    Ok(())
}

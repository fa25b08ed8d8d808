//! File-level plumbing: the atlas manifest, metrics reports and the
//! configuration-driven run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{read_affine, read_displacement, read_labels, read_volume, write_labels};
use crate::volume::{AffineTransform, Geometry};

use super::{run_case, AtlasCase, CaseOutput, MethodResult, PipelineConfig, TargetImage};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "intensity_path", "label_path", "affine_path", "dfield_path"];
pub const METRICS_HEADER: [&str; 5] = ["roi", "method", "dice", "stage", "seconds"];

/// One manifest row. Relative paths are resolved against the manifest's
/// directory when read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub intensity_path: PathBuf,
    pub label_path: PathBuf,
    pub affine_path: Option<PathBuf>,
    pub dfield_path: Option<PathBuf>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Format(format!("{}: manifest header must be {}", path.display(), MANIFEST_HEADER.join(","))));
    }
    let resolve = |s: &str| -> Option<PathBuf> {
        if s.is_empty() {
            return None;
        }
        let p = PathBuf::from(s);
        Some(if p.is_absolute() { p } else { base.join(p) })
    };
    let mut out: Vec<ManifestEntry> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(Error::Format(format!("{}: empty atlas id", path.display())));
        }
        if out.iter().any(|e| e.id == id) {
            return Err(Error::Format(format!("{}: duplicate atlas id '{id}'", path.display())));
        }
        let required = |i: usize, what: &str| {
            resolve(field(i)).ok_or_else(|| Error::Format(format!("{}: atlas '{id}' has no {what}", path.display())))
        };
        out.push(ManifestEntry {
            intensity_path: required(1, "intensity image")?,
            label_path: required(2, "label map")?,
            affine_path: resolve(field(3)),
            dfield_path: resolve(field(4)),
            id,
        });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no atlases", path.display())));
    }
    Ok(out)
}

/// Writes a manifest with paths relative to its own directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, e))?;
    for e in entries {
        let opt = |p: &Option<PathBuf>| p.as_deref().map(rel).unwrap_or_default();
        w.write_record([e.id.clone(), rel(&e.intensity_path), rel(&e.label_path), opt(&e.affine_path), opt(&e.dfield_path)])
            .map_err(|er| csv_err(path, er))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every manifest atlas. Displacement fields must lie on `common`.
pub fn load_atlases(entries: &[ManifestEntry], common: &Geometry) -> Result<Vec<AtlasCase>> {
    entries
        .iter()
        .map(|e| {
            let intensity = read_volume(&e.intensity_path)?;
            let labels = read_labels(&e.label_path)
                .map_err(|err| Error::InvalidInput(format!("atlas {}: labels unreadable: {err}", e.id)))?;
            intensity.geometry().ensure_same(labels.geometry(), &format!("atlas {} labels", e.id))?;
            let affine = match &e.affine_path {
                Some(p) => read_affine(p)?,
                None => AffineTransform::identity(),
            };
            let field = match &e.dfield_path {
                Some(p) => {
                    let f = read_displacement(p)?;
                    f.geometry().ensure_same(common, &format!("atlas {} displacement field", e.id))?;
                    Some(f)
                }
                None => None,
            };
            Ok(AtlasCase { id: e.id.clone(), intensity, labels, affine, field })
        })
        .collect()
}

/// CSV rows `roi,method,dice,stage,seconds`: one per stage plus a `total`.
pub fn metrics_csv(results: &[MethodResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in results {
        let dice = r.dice.map(|d| d.to_string()).unwrap_or_default();
        let total: f64 = r.stages.iter().map(|s| s.seconds).sum();
        for (stage, secs) in r.stages.iter().map(|s| (s.stage.as_str(), s.seconds)).chain([("total", total)]) {
            w.write_record([r.roi.as_str(), r.method.name(), &dice, stage, &format!("{secs:.6}")]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Path of the configuration echo written next to a metrics report.
pub fn config_echo_path(metrics: &Path) -> PathBuf {
    let mut s = metrics.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

/// Reads inputs named by `config`, runs `config.method`, and writes the
/// segmentation, metrics report and configuration echo when paths are set.
pub fn run_pipeline(config: &PipelineConfig) -> Result<CaseOutput> {
    config.validate()?;
    let target_path = config.target.as_ref().ok_or_else(|| Error::Config("target is required".into()))?;
    let library = config.library.as_ref().ok_or_else(|| Error::Config("library is required".into()))?;
    let intensity = read_volume(target_path)?;
    let affine = match &config.target_affine {
        Some(p) => read_affine(p)?,
        None => AffineTransform::identity(),
    };
    let truth = config.truth.as_ref().map(|p| read_labels(p)).transpose()?;
    let common = *intensity.geometry();
    let atlases = load_atlases(&read_manifest(library)?, &common)?;
    let target = TargetImage { intensity, affine, common, truth };
    let out = run_case(&target, &atlases, config, &[config.method])?;
    if let Some(p) = &config.output {
        write_labels(p, &out.labels[&config.method])?;
    }
    if let Some(p) = &config.metrics {
        std::fs::write(p, metrics_csv(&out.results))?;
        std::fs::write(config_echo_path(p), config.echo())?;
    }
    Ok(out)
}

//! End-to-end segmentation of one target: cropping, atlas ranking, label
//! transfer, CRF fusion, patch fusion and mapping back to native space.
//!
//! Three spaces are involved. Each image lives on its own native grid. The
//! common grid is the target's normalized space; an affine per image maps
//! common-space points into that image's native space, and an optional
//! displacement field on the common grid refines an atlas's affine
//! (`p ↦ A(p + d(p))`). All fusion work happens on a crop of the common grid.

pub mod config;
pub mod library;

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

pub use config::{parse_key_values, Method, PipelineConfig, RoiMode};

use crate::crf::{min_cut, CrfModel, CrfParams};
use crate::error::{Error, Result};
use crate::filters::{apply_bank, whiten, FeatureVolume, FilterBankKind, FilterBankSpec};
use crate::fusion::{label_prior, majority_vote, staple_em, StapleParams};
use crate::knn::KnnModel;
use crate::patch::{patch_fusion, PatchAtlas, PatchMode};
use crate::similarity::{mutual_information, rank_atlases, SimilarityMetric};
use crate::volume::{
    dice, histogram_match, resample, signed_distance, transfer_labels_logodds, uncertainty_mask, union_support,
    AffineTransform, DisplacementField, FieldThenAffine, Geometry, Interpolation, LabelMap, RegionOfInterest,
    SignedDistanceMap, Volume, DEFAULT_HISTOGRAM_LEVELS,
};

/// The image being segmented.
#[derive(Debug, Clone)]
pub struct TargetImage {
    /// Native intensities.
    pub intensity: Volume,
    /// Common space to native space.
    pub affine: AffineTransform,
    /// The common grid.
    pub common: Geometry,
    /// Native ground truth, when known.
    pub truth: Option<LabelMap>,
}

/// One library atlas prepared for a particular target.
#[derive(Debug, Clone)]
pub struct AtlasCase {
    pub id: String,
    pub intensity: Volume,
    pub labels: LabelMap,
    /// Common space to this atlas's native space.
    pub affine: AffineTransform,
    /// Non-rigid refinement on the full common grid.
    pub field: Option<DisplacementField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub roi: String,
    pub method: Method,
    pub dice: Option<f64>,
    pub stages: Vec<StageTiming>,
}

/// Overlap of the union of transferred labels with the truth, for
/// non-rigid and affine-only transfer of the same atlases.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaReport {
    pub roi: String,
    pub nonrigid_coverage: f64,
    pub affine_coverage: f64,
    pub nonrigid_size: usize,
    pub affine_size: usize,
}

#[derive(Debug, Clone)]
pub struct CaseOutput {
    /// Native-space segmentation per method.
    pub labels: BTreeMap<Method, LabelMap>,
    pub results: Vec<MethodResult>,
    pub omega: Vec<OmegaReport>,
    pub warnings: Vec<String>,
}

fn method_stages(m: Method) -> &'static [&'static str] {
    match m {
        Method::Mv => &["prepare", "crop", "rank", "transfer", "vote"],
        Method::Staple => &["prepare", "crop", "rank", "transfer", "staple"],
        Method::Wv => &["prepare", "crop", "rank", "transfer", "weights", "wv"],
        Method::Crf => &["prepare", "crop", "rank", "transfer", "weights", "features", "knn", "crf"],
        Method::Patch => &["prepare", "crop", "normalize", "patch"],
        Method::Combined => {
            &["prepare", "crop", "rank", "transfer", "weights", "features", "knn", "crf", "normalize", "combined"]
        }
    }
}

#[derive(Default)]
struct Timer {
    seconds: BTreeMap<&'static str, f64>,
}

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *self.seconds.entry(stage).or_insert(0.0) += t0.elapsed().as_secs_f64();
        out
    }
}

struct Prepared<'a> {
    target: &'a TargetImage,
    atlases: &'a [AtlasCase],
    config: &'a PipelineConfig,
    target_common: Volume,
    truth_common: Option<LabelMap>,
    sdms: Vec<SignedDistanceMap>,
    affine_labels: Vec<LabelMap>,
}

struct RoiOutput {
    name: String,
    roi: RegionOfInterest,
    labels: BTreeMap<Method, LabelMap>,
    timer: Timer,
    omega: Option<OmegaReport>,
    warnings: Vec<String>,
}

fn note(warnings: &mut Vec<String>, msg: String) {
    warn!("{msg}");
    warnings.push(msg);
}

/// Voxels of `g` whose x index lies in the requested half.
fn half_mask(g: &Geometry, left: bool) -> LabelMap {
    let mid = g.dims[0] / 2;
    LabelMap::from_fn(*g, |c| (c[0] < mid) == left)
}

fn hemisphere_masks(cfg: &PipelineConfig, g: &Geometry) -> Vec<(String, Option<LabelMap>)> {
    match cfg.rois {
        RoiMode::Single => vec![("all".to_string(), None)],
        RoiMode::Hemispheres => {
            vec![("left".to_string(), Some(half_mask(g, true))), ("right".to_string(), Some(half_mask(g, false)))]
        }
    }
}

fn restrict(l: LabelMap, half: Option<&LabelMap>) -> Result<LabelMap> {
    match half {
        Some(h) => l.and(h),
        None => Ok(l),
    }
}

/// Runs `methods` on one target and reports native segmentations, Dice
/// against the truth when available and per-stage timings.
pub fn run_case(
    target: &TargetImage,
    atlases: &[AtlasCase],
    config: &PipelineConfig,
    methods: &[Method],
) -> Result<CaseOutput> {
    config.validate()?;
    if atlases.is_empty() {
        return Err(Error::InvalidInput("atlas library is empty".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("no fusion method requested".into()));
    }
    let common = target.common;
    let mut timer = Timer::default();
    let prepared = timer.time("prepare", || -> Result<Prepared> {
        let target_common = resample(&target.intensity, &target.affine, &common, Interpolation::Trilinear, 0.0)?;
        let truth_common = match &target.truth {
            Some(t) => {
                target.intensity.geometry().ensure_same(t.geometry(), "target truth")?;
                let v = resample(&t.to_volume(), &target.affine, &common, Interpolation::Nearest, 0.0)?;
                Some(LabelMap::threshold(&v, 0.5))
            }
            None => None,
        };
        let sdms = atlases
            .par_iter()
            .map(|a| {
                a.intensity.geometry().ensure_same(a.labels.geometry(), &format!("atlas {} labels", a.id))?;
                signed_distance(&a.labels).map_err(|e| Error::InvalidInput(format!("atlas {}: {e}", a.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let affine_labels = atlases
            .par_iter()
            .zip(&sdms)
            .map(|(a, s)| transfer_labels_logodds(s, &FieldThenAffine { field: None, affine: &a.affine }, &common))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { target, atlases, config, target_common, truth_common, sdms, affine_labels })
    })?;

    let mut warnings = Vec::new();
    let missing: Vec<&str> = atlases.iter().filter(|a| a.field.is_none()).map(|a| a.id.as_str()).collect();
    if !missing.is_empty() {
        note(
            &mut warnings,
            format!(
                "WARNING: no displacement field for atlas(es) {}; their labels are transferred by the affine alone",
                missing.join(", ")
            ),
        );
    }

    let rois = hemisphere_masks(config, &common);
    let outputs = rois
        .par_iter()
        .map(|(name, half)| run_roi(&prepared, name, half.as_ref(), methods))
        .collect::<Result<Vec<_>>>()?;

    // back to native space, all regions pasted together
    let native_g = *target.intensity.geometry();
    let inverse = target.affine.inverse()?;
    let mut labels = BTreeMap::new();
    let mut back_seconds = BTreeMap::new();
    for &m in methods {
        let t0 = Instant::now();
        let mut full = LabelMap::empty(common);
        for out in &outputs {
            let crop = &out.labels[&m];
            let dims = out.roi.dims();
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        if crop.data()[crop.geometry().index(i, j, k)] {
                            let d = common.index(out.roi.lo[0] + i, out.roi.lo[1] + j, out.roi.lo[2] + k);
                            full.data_mut()[d] = true;
                        }
                    }
                }
            }
        }
        let native = if inverse.is_identity() && common == native_g {
            full
        } else {
            let v = resample(&full.to_volume(), &inverse, &native_g, Interpolation::Nearest, 0.0)?;
            LabelMap::threshold(&v, 0.5)
        };
        back_seconds.insert(m, t0.elapsed().as_secs_f64());
        labels.insert(m, native);
    }

    let native_halves: Vec<Option<LabelMap>> = match config.rois {
        RoiMode::Single => vec![None],
        RoiMode::Hemispheres => {
            let mid = common.dims[0] / 2;
            let side = |left: bool| {
                LabelMap::from_fn(native_g, |c| {
                    let q = inverse.apply(native_g.physical(c));
                    let ci = common.continuous_index(q)[0];
                    (ci < mid as f64 - 0.5) == left
                })
            };
            vec![Some(side(true)), Some(side(false))]
        }
    };

    let mut results = Vec::new();
    for &m in methods {
        for (out, half) in outputs.iter().zip(&native_halves) {
            let dice = match &target.truth {
                Some(t) => {
                    let a = restrict(labels[&m].clone(), half.as_ref())?;
                    let b = restrict(t.clone(), half.as_ref())?;
                    Some(dice(&a, &b)?)
                }
                None => None,
            };
            let stages = method_stages(m)
                .iter()
                .map(|&s| {
                    let seconds = if s == "prepare" { timer.seconds[s] } else { out.timer.seconds.get(s).copied().unwrap_or(0.0) };
                    StageTiming { stage: s.to_string(), seconds }
                })
                .chain(std::iter::once(StageTiming { stage: "backtransform".into(), seconds: back_seconds[&m] }))
                .collect();
            results.push(MethodResult { roi: out.name.clone(), method: m, dice, stages });
        }
    }
    let omega = outputs.iter().filter_map(|o| o.omega.clone()).collect();
    for o in outputs {
        warnings.extend(o.warnings);
    }
    Ok(CaseOutput { labels, results, omega, warnings })
}

fn margin_voxels(cfg: &PipelineConfig, g: &Geometry) -> usize {
    (cfg.margin_mm / g.min_spacing()).ceil() as usize
}

fn bank_for(cfg: &PipelineConfig, g: &Geometry) -> FilterBankSpec {
    FilterBankSpec::new(cfg.filter_bank.unwrap_or_else(|| FilterBankKind::for_geometry(g)))
}

fn features(vol: &Volume, spec: &FilterBankSpec) -> Result<FeatureVolume> {
    whiten(&apply_bank(vol, spec)?, None, None)
}

fn run_roi(p: &Prepared, name: &str, half: Option<&LabelMap>, methods: &[Method]) -> Result<RoiOutput> {
    let cfg = p.config;
    let common = p.target.common;
    let mut timer = Timer::default();
    let mut warnings = Vec::new();
    let wants = |m: Method| methods.contains(&m);
    let needs_transfer = methods.iter().any(|m| *m != Method::Patch);
    let needs_crf = wants(Method::Crf) || wants(Method::Combined);

    let (roi, target_c, half_c, affine_i, affine_l) = timer.time("crop", || -> Result<_> {
        let mut support = LabelMap::empty(common);
        for l in &p.affine_labels {
            for (s, &v) in support.data_mut().iter_mut().zip(l.data()) {
                *s |= v;
            }
        }
        let support = restrict(support, half)?;
        let roi = support
            .bounding_box()
            .ok_or_else(|| Error::Degenerate(format!("roi {name}: no atlas foreground")))?
            .expanded(margin_voxels(cfg, &common), &common);
        let gc = common.cropped(&roi)?;
        let target_c = p.target_common.crop(&roi)?;
        let half_c = half.map(|h| h.crop(&roi)).transpose()?;
        let affine_i = p
            .atlases
            .par_iter()
            .map(|a| {
                resample(&a.intensity, &FieldThenAffine { field: None, affine: &a.affine }, &gc, Interpolation::Trilinear, 0.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let affine_l = p
            .affine_labels
            .iter()
            .map(|l| restrict(l.crop(&roi)?, half_c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok((roi, target_c, half_c, affine_i, affine_l))
    })?;
    let gc = *target_c.geometry();
    let n = p.atlases.len();
    let n_r = cfg.n_r.min(n);
    let n_a = cfg.n_a.min(n);
    if n_r < cfg.n_r {
        note(&mut warnings, format!("roi {name}: n_r = {} clamped to library size {n}", cfg.n_r));
    }
    if n_a < cfg.n_a {
        note(&mut warnings, format!("roi {name}: n_a = {} clamped to library size {n}", cfg.n_a));
    }

    let mut labels: BTreeMap<Method, LabelMap> = BTreeMap::new();
    let mut omega = None;
    let mut crf_labels: Option<LabelMap> = None;
    let mut transferred: Vec<LabelMap> = Vec::new();
    let mut warped: Vec<Volume> = Vec::new();
    let mut omega_star = LabelMap::empty(gc);
    let mut uncertain = LabelMap::empty(gc);

    if needs_transfer {
        let selected = timer.time("rank", || -> Result<Vec<usize>> {
            let list: Vec<(usize, &Volume)> = affine_i.iter().enumerate().collect();
            Ok(rank_atlases(&target_c, &list, SimilarityMetric::MutualInformation, None)?.top(n_r))
        })?;
        (warped, transferred) = timer.time("transfer", || -> Result<(Vec<Volume>, Vec<LabelMap>)> {
            let pairs = selected
                .par_iter()
                .map(|&i| {
                    let a = &p.atlases[i];
                    let field = a.field.as_ref().map(|f| f.crop(&roi)).transpose()?;
                    let map = FieldThenAffine { field: field.as_ref(), affine: &a.affine };
                    let w = resample(&a.intensity, &map, &gc, Interpolation::Trilinear, 0.0)?;
                    let l = restrict(transfer_labels_logodds(&p.sdms[i], &map, &gc)?, half_c.as_ref())?;
                    Ok((w, l))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(pairs.into_iter().unzip())
        })?;
        let refs: Vec<&LabelMap> = transferred.iter().collect();
        omega_star = union_support(&refs)?;
        uncertain = uncertainty_mask(&refs)?;
        if let Some(truth) = &p.truth_common {
            let t = restrict(truth.crop(&roi)?, half_c.as_ref())?;
            let aff: Vec<&LabelMap> = selected.iter().map(|&i| &affine_l[i]).collect();
            let aff_union = union_support(&aff)?;
            omega = Some(OmegaReport {
                roi: name.to_string(),
                nonrigid_coverage: dice(&omega_star.and(&t)?, &t)?,
                affine_coverage: dice(&aff_union.and(&t)?, &t)?,
                nonrigid_size: omega_star.count(),
                affine_size: aff_union.count(),
            });
        }
    }
    let refs: Vec<&LabelMap> = transferred.iter().collect();
    let unanimous = if needs_transfer { majority_vote(&refs)? } else { LabelMap::empty(gc) };

    if wants(Method::Mv) {
        labels.insert(Method::Mv, timer.time("vote", || majority_vote(&refs))?);
    }
    if wants(Method::Staple) {
        let out = timer.time("staple", || staple_em(&refs, &StapleParams::default()));
        let l = match out {
            Ok(r) => r.labels,
            Err(e) => {
                note(&mut warnings, format!("roi {name}: STAPLE unavailable ({e}); using majority vote"));
                majority_vote(&refs)?
            }
        };
        labels.insert(Method::Staple, l);
    }

    let mut prior = None;
    if wants(Method::Wv) || needs_crf {
        let pr = timer.time("weights", || -> Result<Volume> {
            let weights: Vec<f64> = warped
                .par_iter()
                .map(|w| mutual_information(&target_c, w, Some(&omega_star), cfg.bins))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|r| r.unwrap_or(1.0))
                .collect();
            label_prior(&refs, &weights, cfg.q)
        })?;
        if wants(Method::Wv) {
            let l = timer.time("wv", || LabelMap::threshold(&pr, 0.5));
            labels.insert(Method::Wv, l);
        }
        prior = Some(pr);
    }

    if needs_crf {
        let l = if uncertain.count() == 0 {
            unanimous.clone()
        } else {
            let prior = prior.as_ref().expect("prior computed for crf");
            let spec = bank_for(cfg, &gc);
            let (target_fv, atlas_fv) = timer.time("features", || -> Result<_> {
                let t = features(&target_c, &spec)?;
                let a = warped.par_iter().map(|w| features(w, &spec)).collect::<Result<Vec<_>>>()?;
                Ok((t, a))
            })?;
            let likelihood = timer.time("knn", || -> Result<Volume> {
                let domain = omega_star.dilate(1);
                let fvs: Vec<&FeatureVolume> = atlas_fv.iter().collect();
                match KnnModel::build(&fvs, &refs, &domain, cfg.k) {
                    Ok(model) => model.foreground_likelihood(&target_fv, &uncertain),
                    Err(Error::EmptyClass(c)) => {
                        note(&mut warnings, format!("roi {name}: no class-{c} training voxels; flat likelihood"));
                        Ok(Volume::filled(gc, 0.5))
                    }
                    Err(e) => Err(e),
                }
            })?;
            timer.time("crf", || -> Result<LabelMap> {
                let params = CrfParams { lambda: cfg.lambda, c: cfg.c, sigma: None, sigma_g: None };
                let model = CrfModel::build(&likelihood, prior, &target_c, &uncertain, &unanimous, &params)?;
                Ok(min_cut(&model)?.labels)
            })?
        };
        if wants(Method::Crf) {
            labels.insert(Method::Crf, l.clone());
        }
        crf_labels = Some(l);
    }

    if wants(Method::Patch) || wants(Method::Combined) {
        let matched = timer.time("normalize", || -> Result<Vec<Volume>> {
            affine_i.par_iter().map(|v| histogram_match(v, &target_c, DEFAULT_HISTOGRAM_LEVELS)).collect()
        })?;
        if wants(Method::Patch) {
            let l = timer.time("patch", || -> Result<LabelMap> {
                let all: Vec<&LabelMap> = affine_l.iter().collect();
                let support = union_support(&all)?;
                let chosen = ssd_select(&target_c, &matched, &support, n_a)?;
                let lab: Vec<&LabelMap> = chosen.iter().map(|&i| &affine_l[i]).collect();
                let fallback = majority_vote(&lab)?;
                let mask = uncertainty_mask(&lab)?;
                let atlases: Vec<PatchAtlas> =
                    chosen.iter().map(|&i| PatchAtlas { intensity: &matched[i], labels: &affine_l[i] }).collect();
                let out =
                    patch_fusion(&target_c, &fallback, &atlases, &mask, &fallback, &cfg.patch_config(PatchMode::Conventional))?;
                Ok(out.labels)
            })?;
            labels.insert(Method::Patch, l);
        }
        if wants(Method::Combined) {
            let crf = crf_labels.as_ref().expect("crf labels computed for combined");
            let l = timer.time("combined", || -> Result<LabelMap> {
                let (pool_i, pool_l): (Vec<Volume>, Vec<&LabelMap>) = if cfg.patch_nonrigid {
                    let m = warped
                        .par_iter()
                        .map(|w| histogram_match(w, &target_c, DEFAULT_HISTOGRAM_LEVELS))
                        .collect::<Result<Vec<_>>>()?;
                    (m, transferred.iter().collect())
                } else {
                    (matched.clone(), affine_l.iter().collect())
                };
                let chosen = ssd_select(&target_c, &pool_i, &omega_star, n_a.min(pool_i.len()))?;
                let atlases: Vec<PatchAtlas> =
                    chosen.iter().map(|&i| PatchAtlas { intensity: &pool_i[i], labels: pool_l[i] }).collect();
                let out = patch_fusion(&target_c, crf, &atlases, &uncertain, crf, &cfg.patch_config(PatchMode::Combined))?;
                Ok(out.labels)
            })?;
            labels.insert(Method::Combined, l);
        }
    }

    Ok(RoiOutput { name: name.to_string(), roi, labels, timer, omega, warnings })
}

/// Indices of the `n` candidates with the smallest SSD to `target` over `mask`.
fn ssd_select(target: &Volume, pool: &[Volume], mask: &LabelMap, n: usize) -> Result<Vec<usize>> {
    let list: Vec<(usize, &Volume)> = pool.iter().enumerate().collect();
    let m = (mask.count() > 0).then_some(mask);
    Ok(rank_atlases(target, &list, SimilarityMetric::Ssd, m)?.top(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(g: Geometry, c: [f64; 3], r: f64) -> LabelMap {
        LabelMap::from_fn(g, |v| (0..3).map(|a| (v[a] as f64 - c[a]).powi(2)).sum::<f64>() < r * r)
    }

    fn image(l: &LabelMap, seed: u64) -> Volume {
        let g = *l.geometry();
        Volume::from_fn(g, |c| {
            let t = ((c[0] * 7 + c[1] * 13 + c[2] * 3) as u64 + seed) % 11;
            (if l.at(c[0], c[1], c[2]) { 100.0 } else { 60.0 }) + t as f64
        })
        .unwrap()
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig { margin_mm: 4.0, k: 5, ..Default::default() }
    }

    #[test]
    fn unanimous_library_reproduced_by_every_method() {
        let g = Geometry::unit([24, 20, 18]);
        let l = blob(g, [12.0, 10.0, 9.0], 5.0);
        let atlases: Vec<AtlasCase> = (0..3)
            .map(|i| AtlasCase {
                id: format!("a{i}"),
                intensity: image(&l, i),
                labels: l.clone(),
                affine: AffineTransform::identity(),
                field: Some(DisplacementField::zeros(g)),
            })
            .collect();
        let target = TargetImage { intensity: image(&l, 9), affine: AffineTransform::identity(), common: g, truth: Some(l.clone()) };
        let out = run_case(&target, &atlases, &small_config(), &Method::ALL).unwrap();
        for m in Method::ALL {
            assert_eq!(out.labels[&m], l, "{m}");
        }
        assert!(out.results.iter().all(|r| r.dice == Some(1.0)));
        assert!(out.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn target_in_library_segments_itself() {
        let g = Geometry::unit([26, 22, 20]);
        let shapes = [([13.0, 11.0, 10.0], 5.0), ([12.0, 11.0, 10.0], 4.0), ([14.0, 10.0, 10.0], 6.0), ([13.0, 12.0, 9.0], 5.5)];
        let atlases: Vec<AtlasCase> = shapes
            .iter()
            .enumerate()
            .map(|(i, (c, r))| {
                let l = blob(g, *c, *r);
                AtlasCase {
                    id: format!("a{i}"),
                    intensity: image(&l, i as u64),
                    labels: l,
                    affine: AffineTransform::identity(),
                    field: None,
                }
            })
            .collect();
        let target = TargetImage {
            intensity: atlases[0].intensity.clone(),
            affine: AffineTransform::identity(),
            common: g,
            truth: Some(atlases[0].labels.clone()),
        };
        let cfg = PipelineConfig { n_r: 1, n_a: 1, ..small_config() };
        let out = run_case(&target, &atlases, &cfg, &[Method::Mv, Method::Combined]).unwrap();
        for r in &out.results {
            assert!(r.dice.unwrap() >= 0.99, "{:?}", r);
        }
        assert!(out.warnings.iter().any(|w| w.contains("no displacement field")));
    }

    #[test]
    fn hemispheres_are_processed_separately() {
        let g = Geometry::unit([40, 16, 16]);
        let l = LabelMap::from_fn(g, |c| {
            let d = |x: f64| (c[0] as f64 - x).powi(2) + (c[1] as f64 - 8.0).powi(2) + (c[2] as f64 - 8.0).powi(2);
            d(10.0) < 16.0 || d(29.0) < 16.0
        });
        let atlases: Vec<AtlasCase> = (0..2)
            .map(|i| AtlasCase {
                id: format!("a{i}"),
                intensity: image(&l, i),
                labels: l.clone(),
                affine: AffineTransform::identity(),
                field: None,
            })
            .collect();
        let target = TargetImage { intensity: image(&l, 5), affine: AffineTransform::identity(), common: g, truth: Some(l.clone()) };
        let cfg = PipelineConfig { rois: RoiMode::Hemispheres, ..small_config() };
        let out = run_case(&target, &atlases, &cfg, &[Method::Mv]).unwrap();
        assert_eq!(out.results.len(), 2);
        assert_eq!(out.labels[&Method::Mv], l);
        assert_eq!(out.results[0].roi, "left");
        assert_eq!(out.results[1].roi, "right");
    }

    #[test]
    fn integer_shift_affine_round_trips_to_native() {
        let g = Geometry::unit([24, 20, 18]);
        let common_l = blob(g, [12.0, 10.0, 9.0], 4.5);
        // native content shifted by +2 voxels in x
        let shifted = LabelMap::from_fn(g, |c| c[0] >= 2 && common_l.at(c[0] - 2, c[1], c[2]));
        let a = AffineTransform::translation([2.0, 0.0, 0.0]);
        let atlases: Vec<AtlasCase> = (0..2)
            .map(|i| AtlasCase { id: format!("a{i}"), intensity: image(&shifted, i), labels: shifted.clone(), affine: a, field: None })
            .collect();
        let target = TargetImage { intensity: image(&shifted, 4), affine: a, common: g, truth: Some(shifted.clone()) };
        let out = run_case(&target, &atlases, &small_config(), &[Method::Mv, Method::Patch]).unwrap();
        assert_eq!(out.labels[&Method::Mv], shifted);
        assert_eq!(out.labels[&Method::Patch], shifted);
    }
}

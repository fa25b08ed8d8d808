//! Patch-based label fusion: cuboid patches, structural pre-selection,
//! adaptive bandwidths, multi-point estimates and vote aggregation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

/// Added to the standard deviation of every non-constant patch.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// Intensity patches only.
    Conventional,
    /// Intensity and label patches.
    Combined,
}

impl std::str::FromStr for PatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conventional" | "patch" => Ok(Self::Conventional),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown patch mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub patch_radius_mm: f64,
    pub search_radius_mm: f64,
    pub epsilon: f64,
    pub beta_i: f64,
    pub beta_s: f64,
    pub eps_i: f64,
    pub eps_s: f64,
    pub mode: PatchMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_radius_mm: 1.5,
            search_radius_mm: 4.0,
            epsilon: 0.85,
            beta_i: 0.5,
            beta_s: 1.0,
            eps_i: 1e-6,
            eps_s: 1e-6,
            mode: PatchMode::Combined,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_radius_mm > 0.0
            && self.search_radius_mm > 0.0
            && self.epsilon > 0.0
            && self.epsilon < 1.0
            && self.beta_i > 0.0
            && self.beta_s > 0.0
            && self.eps_i > 0.0
            && self.eps_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid patch configuration {self:?}")))
        }
    }
}

/// Per-axis half sizes `ceil(r / spacing)` in voxels.
pub fn half_sizes(r_mm: f64, spacing: [f64; 3]) -> Result<[usize; 3]> {
    if !(r_mm > 0.0 && r_mm.is_finite()) {
        return Err(Error::InvalidInput(format!("patch radius must be positive, got {r_mm}")));
    }
    Ok(spacing.map(|v| {
        let q = r_mm / v;
        // guard against q landing a rounding error above an integer
        let n = q.round();
        if (q - n).abs() <= 1e-9 * q.max(1.0) {
            n as usize
        } else {
            q.ceil() as usize
        }
    }))
}

/// Per-axis patch sizes `2·ceil(r / spacing) + 1`.
pub fn patch_geometry(r_mm: f64, spacing: [f64; 3]) -> Result<[usize; 3]> {
    Ok(half_sizes(r_mm, spacing)?.map(|h| 2 * h + 1))
}

/// Mean and spread of one patch. Constant patches carry σ = 0; others get
/// σ + [`STD_EPSILON`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

impl PatchStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let first = values[0];
        let constant = values.iter().all(|&v| v == first);
        if constant {
            return Self { mean: first, std: 0.0, constant };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() + STD_EPSILON, constant }
    }
}

/// One factor of the structural similarity:
/// `2μμ'/(μ²+μ'²) · 2σσ'/(σ²+σ'²)`. The mean part is 1 when both means are
/// zero; the spread part is 1 when both patches are constant and 0 when
/// exactly one is.
pub fn similarity_factor(a: &PatchStats, b: &PatchStats) -> f64 {
    let mm = a.mean * a.mean + b.mean * b.mean;
    let mean_part = if mm == 0.0 { 1.0 } else { 2.0 * a.mean * b.mean / mm };
    let spread_part = match (a.constant, b.constant) {
        (true, true) => 1.0,
        (false, false) => 2.0 * a.std * b.std / (a.std * a.std + b.std * b.std),
        _ => 0.0,
    };
    mean_part * spread_part
}

/// Product of the intensity and label factors.
pub fn structural_similarity(pi_x: &PatchStats, ps_x: &PatchStats, pi_y: &PatchStats, ps_y: &PatchStats) -> f64 {
    similarity_factor(pi_x, pi_y) * similarity_factor(ps_x, ps_y)
}

/// Pre-selection test for a candidate given its intensity and label factors.
#[inline]
pub fn passes_preselection(ss_intensity: f64, ss_label: f64, config: &PatchConfig) -> bool {
    match config.mode {
        PatchMode::Conventional => ss_intensity > config.epsilon,
        PatchMode::Combined => ss_intensity * ss_label > config.epsilon * config.epsilon,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub h_i2: f64,
    pub h_s2: f64,
}

/// `h² = β · (minimal squared distance in the search windows) + ε`.
pub fn bandwidths(min_di2: f64, min_ds2: f64, config: &PatchConfig) -> Bandwidths {
    Bandwidths {
        h_i2: config.beta_i * min_di2 + config.eps_i,
        h_s2: config.beta_s * min_ds2 + config.eps_s,
    }
}

/// Candidate weight. Combined mode multiplies the intensity and label terms.
pub fn weight(di2: f64, ds2: f64, bw: &Bandwidths, mode: PatchMode) -> f64 {
    (-log_weight_penalty(di2, ds2, bw, mode)).exp()
}

#[inline]
fn log_weight_penalty(di2: f64, ds2: f64, bw: &Bandwidths, mode: PatchMode) -> f64 {
    match mode {
        PatchMode::Conventional => di2 / bw.h_i2,
        PatchMode::Combined => di2 / bw.h_i2 + ds2 / bw.h_s2,
    }
}

/// Weighted mean of label patches; `None` when the weights sum to zero.
pub fn multipoint_estimate(candidates: &[(f64, &[f64])]) -> Option<Vec<f64>> {
    let total: f64 = candidates.iter().map(|c| c.0).sum();
    if candidates.is_empty() || !(total > 0.0) {
        return None;
    }
    let len = candidates[0].1.len();
    let mut out = vec![0.0; len];
    for (w, patch) in candidates {
        out.iter_mut().zip(patch.iter()).for_each(|(o, v)| *o += w * v);
    }
    out.iter_mut().for_each(|o| *o /= total);
    Some(out)
}

/// Per-voxel vote tallies from overlapping patch estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPatchEstimate {
    geometry: Geometry,
    foreground: Vec<u32>,
    total: Vec<u32>,
}

impl LabelPatchEstimate {
    pub fn new(geometry: Geometry) -> Self {
        Self { geometry, foreground: vec![0; geometry.len()], total: vec![0; geometry.len()] }
    }

    /// Records one estimate value at voxel `idx`.
    pub fn cast(&mut self, idx: usize, value: f64) {
        self.total[idx] += 1;
        if value > 0.5 {
            self.foreground[idx] += 1;
        }
    }

    /// Scatters a patch estimate centred on `center` with per-axis half
    /// sizes `half`; positions outside the grid are dropped.
    pub fn scatter(&mut self, center: [usize; 3], half: [usize; 3], values: &[f64], mask: Option<&LabelMap>) {
        let g = self.geometry;
        let mut t = 0;
        for dz in 0..2 * half[2] + 1 {
            for dy in 0..2 * half[1] + 1 {
                for dx in 0..2 * half[0] + 1 {
                    let v = [
                        center[0] as isize + dx as isize - half[0] as isize,
                        center[1] as isize + dy as isize - half[1] as isize,
                        center[2] as isize + dz as isize - half[2] as isize,
                    ];
                    let inside = (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < g.dims[a]);
                    if inside {
                        let idx = g.index(v[0] as usize, v[1] as usize, v[2] as usize);
                        if mask.is_none_or(|m| m.data()[idx]) {
                            self.cast(idx, values[t]);
                        }
                    }
                    t += 1;
                }
            }
        }
    }

    pub fn votes(&self, idx: usize) -> (u32, u32) {
        (self.foreground[idx], self.total[idx])
    }
}

/// Majority of covering estimates inside `mask` (ties to background);
/// `fallback` everywhere else and where no estimate covers a voxel.
/// Returns the map and the number of uncovered mask voxels.
pub fn aggregate(est: &LabelPatchEstimate, mask: &LabelMap, fallback: &LabelMap) -> Result<(LabelMap, usize)> {
    est.geometry.ensure_same(mask.geometry(), "aggregation mask")?;
    est.geometry.ensure_same(fallback.geometry(), "fallback labels")?;
    let mut out = fallback.clone();
    let mut uncovered = 0;
    for i in 0..mask.data().len() {
        if !mask.data()[i] {
            continue;
        }
        let (fg, total) = est.votes(i);
        if total == 0 {
            uncovered += 1;
        } else {
            out.data_mut()[i] = 2 * fg > total;
        }
    }
    Ok((out, uncovered))
}

/// One aligned atlas on the target crop grid.
#[derive(Debug, Clone, Copy)]
pub struct PatchAtlas<'a> {
    pub intensity: &'a Volume,
    pub labels: &'a LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFusionResult {
    pub labels: LabelMap,
    /// Mask voxels that received no estimate and kept the fallback label.
    pub uncovered: usize,
    /// Mask voxels whose own candidate set was empty.
    pub voxels_without_candidates: usize,
    pub candidates: usize,
}

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

/// Values of `data` (on grid `g`) over the box `lo .. lo + dims`, with
/// mirror reflection outside the grid. Output is x-fastest.
fn padded_box(data: &[f64], g: &Geometry, lo: [isize; 3], dims: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    let xs: Vec<usize> = (0..dims[0]).map(|i| mirror(lo[0] + i as isize, g.dims[0])).collect();
    for k in 0..dims[2] {
        let z = mirror(lo[2] + k as isize, g.dims[2]);
        for j in 0..dims[1] {
            let y = mirror(lo[1] + j as isize, g.dims[1]);
            let row = g.dims[0] * (y + g.dims[1] * z);
            out.extend(xs.iter().map(|&x| data[row + x]));
        }
    }
    out
}

/// Sliding sum of width `w` along `axis` of an x-fastest array, shrinking
/// that axis by `w - 1`.
fn box_sum(src: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] = dims[axis] + 1 - w;
    let mut out = vec![0.0; od[0] * od[1] * od[2]];
    let stride_in = [1, dims[0], dims[0] * dims[1]];
    let stride_out = [1, od[0], od[0] * od[1]];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for u in 0..od[a2] {
        for v in 0..od[a1] {
            let base_in = u * stride_in[a2] + v * stride_in[a1];
            let base_out = u * stride_out[a2] + v * stride_out[a1];
            let si = stride_in[axis];
            let so = stride_out[axis];
            let mut acc: f64 = (0..w).map(|t| src[base_in + t * si]).sum();
            out[base_out] = acc;
            for t in 1..od[axis] {
                acc += src[base_in + (t + w - 1) * si] - src[base_in + (t - 1) * si];
                out[base_out + t * so] = acc;
            }
        }
    }
    (out, od)
}

/// Exact box sum over a `(2h+1)`-cuboid, recomputed per row to avoid
/// drift from running differences.
fn box_sum3(src: &[f64], dims: [usize; 3], half: [usize; 3]) -> Vec<f64> {
    let (a, d1) = box_sum(src, dims, 0, 2 * half[0] + 1);
    let (b, d2) = box_sum(&a, d1, 1, 2 * half[1] + 1);
    box_sum(&b, d2, 2, 2 * half[2] + 1).0
}

fn stats_field(data: &[f64], g: &Geometry, half: [usize; 3], lo: [isize; 3], dims: [usize; 3]) -> Vec<PatchStats> {
    let ext = [dims[0] + 2 * half[0], dims[1] + 2 * half[1], dims[2] + 2 * half[2]];
    let elo = [lo[0] - half[0] as isize, lo[1] - half[1] as isize, lo[2] - half[2] as isize];
    let padded = padded_box(data, g, elo, ext);
    let size = [2 * half[0] + 1, 2 * half[1] + 1, 2 * half[2] + 1];
    (0..dims[0] * dims[1] * dims[2])
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(size[0] * size[1] * size[2]),
            |buf: &mut Vec<f64>, r| {
                let (x, y, z) = (r % dims[0], (r / dims[0]) % dims[1], r / (dims[0] * dims[1]));
                buf.clear();
                for dz in 0..size[2] {
                    for dy in 0..size[1] {
                        let start = x + ext[0] * (y + dy + ext[1] * (z + dz));
                        buf.extend_from_slice(&padded[start..start + size[0]]);
                    }
                }
                PatchStats::of(buf)
            },
        )
        .collect()
}

/// Fuses label patches from `atlases` at every voxel of `mask`.
///
/// `target_labels` supplies the target label patches used in combined mode
/// (ignored otherwise). `fallback` provides labels outside `mask` and at
/// mask voxels that no estimate covers.
pub fn patch_fusion(
    target: &Volume,
    target_labels: &LabelMap,
    atlases: &[PatchAtlas<'_>],
    mask: &LabelMap,
    fallback: &LabelMap,
    config: &PatchConfig,
) -> Result<PatchFusionResult> {
    config.validate()?;
    let sp = target.geometry().spacing;
    let hp = half_sizes(config.patch_radius_mm, sp)?;
    let hs = half_sizes(config.search_radius_mm, sp)?;
    fuse_with_half_sizes(target, target_labels, atlases, mask, fallback, config, hp, hs)
}

#[allow(clippy::too_many_arguments)]
fn fuse_with_half_sizes(
    target: &Volume,
    target_labels: &LabelMap,
    atlases: &[PatchAtlas<'_>],
    mask: &LabelMap,
    fallback: &LabelMap,
    config: &PatchConfig,
    hp: [usize; 3],
    hs: [usize; 3],
) -> Result<PatchFusionResult> {
    let g = *target.geometry();
    for (what, other) in
        [("target labels", target_labels.geometry()), ("mask", mask.geometry()), ("fallback", fallback.geometry())]
    {
        g.ensure_same(other, what)?;
    }
    if atlases.is_empty() {
        return Err(Error::InvalidInput("patch fusion needs at least one atlas".into()));
    }
    for a in atlases {
        g.ensure_same(a.intensity.geometry(), "atlas intensity")?;
        g.ensure_same(a.labels.geometry(), "atlas labels")?;
    }
    let Some(roi) = mask.bounding_box() else {
        return Ok(PatchFusionResult {
            labels: fallback.clone(),
            uncovered: 0,
            voxels_without_candidates: 0,
            candidates: 0,
        });
    };
    let combined = config.mode == PatchMode::Combined;
    let rdims = roi.dims();
    let rlen = rdims[0] * rdims[1] * rdims[2];
    let rlo = roi.lo.map(|v| v as isize);
    let psize = [2 * hp[0] + 1, 2 * hp[1] + 1, 2 * hp[2] + 1];
    let plen = psize[0] * psize[1] * psize[2];

    // mask voxels by ROI-local index
    let mut points: Vec<(usize, usize)> = Vec::new();
    for r in 0..rlen {
        let c = [roi.lo[0] + r % rdims[0], roi.lo[1] + (r / rdims[0]) % rdims[1], roi.lo[2] + r / (rdims[0] * rdims[1])];
        let idx = g.index(c[0], c[1], c[2]);
        if mask.data()[idx] {
            points.push((r, idx));
        }
    }

    let target_labels_f = target_labels.to_volume();
    let ti_stats = stats_field(target.data(), &g, hp, rlo, rdims);
    let ts_stats = if combined { stats_field(target_labels_f.data(), &g, hp, rlo, rdims) } else { Vec::new() };

    // search neighbourhood of the ROI
    let slo = [rlo[0] - hs[0] as isize, rlo[1] - hs[1] as isize, rlo[2] - hs[2] as isize];
    let sdims = [rdims[0] + 2 * hs[0], rdims[1] + 2 * hs[1], rdims[2] + 2 * hs[2]];
    let ext = [rdims[0] + 2 * hp[0], rdims[1] + 2 * hp[1], rdims[2] + 2 * hp[2]];
    let elo = [rlo[0] - hp[0] as isize, rlo[1] - hp[1] as isize, rlo[2] - hp[2] as isize];
    let t_ext = padded_box(target.data(), &g, elo, ext);
    let ts_ext = padded_box(target_labels_f.data(), &g, elo, ext);
    let wdims = [ext[0] + 2 * hs[0], ext[1] + 2 * hs[1], ext[2] + 2 * hs[2]];
    let wlo = [elo[0] - hs[0] as isize, elo[1] - hs[1] as isize, elo[2] - hs[2] as isize];
    let shifts: Vec<[isize; 3]> = {
        let mut v = Vec::new();
        for dz in -(hs[2] as isize)..=hs[2] as isize {
            for dy in -(hs[1] as isize)..=hs[1] as isize {
                for dx in -(hs[0] as isize)..=hs[0] as isize {
                    v.push([dx, dy, dz]);
                }
            }
        }
        v
    };

    // per-atlas windows and stats, shared by both passes
    struct Prepared {
        a_win: Vec<f64>,
        s_win: Vec<f64>,
        ai_stats: Vec<PatchStats>,
        as_stats: Vec<PatchStats>,
        /// Foreground count of the label patch cornered at each window position.
        ones: Vec<f64>,
    }
    let prepared: Vec<Prepared> = atlases
        .par_iter()
        .map(|atlas| {
            let lab = atlas.labels.to_volume();
            let s_win = padded_box(lab.data(), &g, wlo, wdims);
            Prepared {
                a_win: padded_box(atlas.intensity.data(), &g, wlo, wdims),
                ones: box_sum3(&s_win, wdims, hp),
                s_win,
                ai_stats: stats_field(atlas.intensity.data(), &g, hp, slo, sdims),
                as_stats: if combined { stats_field(lab.data(), &g, hp, slo, sdims) } else { Vec::new() },
            }
        })
        .collect();
    let local: Vec<[usize; 3]> =
        points.iter().map(|&(r, _)| [r % rdims[0], (r / rdims[0]) % rdims[1], r / (rdims[0] * rdims[1])]).collect();

    // Calls `visit(point, shift index, window offset, di2, ds2)` for every
    // mask point whose shifted centre lies inside the grid.
    let sweep = |p: &Prepared, visit: &mut dyn FnMut(usize, usize, [usize; 3], f64, f64)| {
        let mut diff = vec![0.0; ext[0] * ext[1] * ext[2]];
        let mut diff_s = vec![0.0; if combined { diff.len() } else { 0 }];
        for (si, s) in shifts.iter().enumerate() {
            let off = [(s[0] + hs[0] as isize) as usize, (s[1] + hs[1] as isize) as usize, (s[2] + hs[2] as isize) as usize];
            for k in 0..ext[2] {
                for j in 0..ext[1] {
                    let e_row = ext[0] * (j + ext[1] * k);
                    let w_row = off[0] + wdims[0] * (j + off[1] + wdims[1] * (k + off[2]));
                    for i in 0..ext[0] {
                        let d = t_ext[e_row + i] - p.a_win[w_row + i];
                        diff[e_row + i] = d * d;
                    }
                    if combined {
                        for i in 0..ext[0] {
                            let d = ts_ext[e_row + i] - p.s_win[w_row + i];
                            diff_s[e_row + i] = d * d;
                        }
                    }
                }
            }
            let di = box_sum3(&diff, ext, hp);
            let ds = if combined { box_sum3(&diff_s, ext, hp) } else { Vec::new() };
            for (pi, (&(r, _), rc)) in points.iter().zip(&local).enumerate() {
                let inside = (0..3).all(|a| {
                    let y = rlo[a] + rc[a] as isize + s[a];
                    y >= 0 && y < g.dims[a] as isize
                });
                if inside {
                    visit(pi, si, off, di[r], if combined { ds[r] } else { 0.0 });
                }
            }
        }
    };

    // pass 1: whole-window minima, which set the bandwidths
    let minima: Vec<(Vec<f64>, Vec<f64>)> = prepared
        .par_iter()
        .map(|p| {
            let mut min_i = vec![f64::INFINITY; points.len()];
            let mut min_s = vec![f64::INFINITY; points.len()];
            sweep(p, &mut |pi, _, _, di2, ds2| {
                min_i[pi] = min_i[pi].min(di2);
                min_s[pi] = min_s[pi].min(ds2);
            });
            (min_i, min_s)
        })
        .collect();
    let bws: Vec<Option<Bandwidths>> = (0..points.len())
        .map(|pi| {
            let min_i = minima.iter().map(|m| m.0[pi]).fold(f64::INFINITY, f64::min);
            let min_s = minima.iter().map(|m| m.1[pi]).fold(f64::INFINITY, f64::min);
            min_i.is_finite().then(|| bandwidths(min_i, if combined { min_s } else { 0.0 }, config))
        })
        .collect();

    // pass 2: weighted label patches of the pre-selected candidates
    let offsets: Vec<usize> = (0..plen)
        .map(|t| {
            let (dx, dy, dz) = (t % psize[0], (t / psize[0]) % psize[1], t / (psize[0] * psize[1]));
            dx + wdims[0] * (dy + wdims[1] * dz)
        })
        .collect();
    let span = offsets[plen - 1] + 1;
    struct Accumulated {
        sums: Vec<f64>,
        /// Weight of all-foreground patches, added to every offset at the end.
        full: Vec<f64>,
        totals: Vec<f64>,
        candidates: usize,
    }
    let partial: Vec<Accumulated> = prepared
        .par_iter()
        .map(|p| {
            let mut acc = Accumulated {
                sums: vec![0.0; points.len() * plen],
                full: vec![0.0; points.len()],
                totals: vec![0.0; points.len()],
                candidates: 0,
            };
            sweep(p, &mut |pi, _, off, di2, ds2| {
                let Some(bw) = &bws[pi] else { return };
                let r = points[pi].0;
                let rc = local[pi];
                let sc = [rc[0] + off[0], rc[1] + off[1], rc[2] + off[2]];
                let sidx = sc[0] + sdims[0] * (sc[1] + sdims[1] * sc[2]);
                let ss_i = similarity_factor(&ti_stats[r], &p.ai_stats[sidx]);
                let ss_s = if combined { similarity_factor(&ts_stats[r], &p.as_stats[sidx]) } else { 1.0 };
                if !passes_preselection(ss_i, ss_s, config) {
                    return;
                }
                acc.candidates += 1;
                let w = weight(di2, ds2, bw, config.mode);
                if w == 0.0 {
                    return;
                }
                acc.totals[pi] += w;
                // the patch corner in window coordinates is the shifted centre
                let count = p.ones[sidx];
                if count == 0.0 {
                    return;
                }
                if count == plen as f64 {
                    acc.full[pi] += w;
                    return;
                }
                let base = sc[0] + wdims[0] * (sc[1] + wdims[1] * sc[2]);
                let win = &p.s_win[base..base + span];
                for (o, &d) in acc.sums[pi * plen..(pi + 1) * plen].iter_mut().zip(&offsets) {
                    *o += w * win[d];
                }
            });
            acc
        })
        .collect();

    let mut est = LabelPatchEstimate::new(g);
    let mut without = 0;
    let mut values = vec![0.0; plen];
    for (pi, &(_, idx)) in points.iter().enumerate() {
        let total: f64 = partial.iter().map(|a| a.totals[pi]).sum();
        if !(total > 0.0) {
            without += 1;
            continue;
        }
        let full: f64 = partial.iter().map(|a| a.full[pi]).sum();
        values.iter_mut().for_each(|v| *v = full);
        for a in &partial {
            for (v, x) in values.iter_mut().zip(&a.sums[pi * plen..(pi + 1) * plen]) {
                *v += x;
            }
        }
        values.iter_mut().for_each(|v| *v /= total);
        est.scatter(g.coords(idx), hp, &values, Some(mask));
    }
    let candidates = partial.iter().map(|a| a.candidates).sum();
    let (labels, uncovered) = aggregate(&est, mask, fallback)?;
    Ok(PatchFusionResult { labels, uncovered, voxels_without_candidates: without, candidates })
}

//! Synthetic atlas cohorts with known ground truth, and the leave-one-out
//! evaluation protocol.
//!
//! Every subject is a bent superellipsoid (plus a touching distractor blob of
//! similar brightness) seen through its own smooth deformation `u_s`: the
//! anatomy at common-space point `c` is the base anatomy at `c + u_s(c)`.
//! Native images are the common-space anatomy shifted by a whole number of
//! voxels, so affine resampling between spaces is exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{write_affine, write_displacement, write_labels, write_volume};
use crate::pipeline::config::parse_value;
use crate::pipeline::library::{write_manifest, ManifestEntry};
use crate::pipeline::{parse_key_values, run_case, AtlasCase, Method, OmegaReport, PipelineConfig, TargetImage};
use crate::volume::{AffineTransform, DisplacementField, Geometry, LabelMap, Volume};

/// Harmonics per displacement component.
const HARMONICS: usize = 3;
/// Wavelength of the anatomical texture (mm).
const TEXTURE_WAVELENGTH_MM: f64 = 7.0;
const INVERSION_TOLERANCE: f64 = 1e-10;
const INVERSION_MAX_ITER: usize = 200;
/// Composed fields are accurate to this much (mm), far below any residual.
const FIELD_TOLERANCE_MM: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Centre of the base shape in common space (mm).
    pub center_mm: [f64; 3],
    /// Superellipsoid semi-axes (mm).
    pub axes_mm: [f64; 3],
    pub exponent: f64,
    /// Bend of the long axis: `y` shifts by `bend · x²` (1/mm).
    pub bend: f64,
    pub distractor_offset_mm: [f64; 3],
    pub distractor_axes_mm: [f64; 3],
    pub distractor_mean: f64,
    /// Amplitude of the fundamental of each per-subject warp component (mm).
    pub deformation_mm: f64,
    /// Wavelength of the fundamental (mm).
    pub smoothness_mm: f64,
    /// Largest per-axis translation between common and native space (mm).
    pub affine_shift_mm: f64,
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    /// Relative amplitude of the linear bias field.
    pub bias_amp: f64,
    /// RMS of the perturbation added to exact inter-subject fields (mm).
    pub residual_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 48, 64],
            spacing: [1.0; 3],
            center_mm: [28.0, 21.0, 31.5],
            axes_mm: [18.0, 7.0, 7.0],
            exponent: 2.5,
            bend: 0.015,
            distractor_offset_mm: [20.0, 4.0, 0.0],
            distractor_axes_mm: [6.0, 6.0, 6.0],
            distractor_mean: 100.0,
            deformation_mm: 2.0,
            smoothness_mm: 48.0,
            affine_shift_mm: 2.0,
            fg_mean: 100.0,
            bg_mean: 90.0,
            texture_amp: 6.0,
            noise_sigma: 4.0,
            bias_amp: 0.1,
            residual_mm: 1.5,
            seed: 1,
        }
    }
}

fn fmt3<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse3<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key} needs three comma-separated values, got '{value}'")));
    }
    Ok([parse_value(key, parts[0])?, parse_value(key, parts[1])?, parse_value(key, parts[2])?])
}

impl PhantomSpec {
    /// No deformation, noise, bias or shift: every subject is identical.
    pub fn degenerate() -> Self {
        Self { deformation_mm: 0.0, noise_sigma: 0.0, bias_amp: 0.0, affine_shift_mm: 0.0, residual_mm: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.dims.iter().any(|&d| d < 8) {
            return bad("every dimension needs at least 8 voxels");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        if self.axes_mm.iter().chain(&self.distractor_axes_mm).any(|&a| !(a > 0.0)) {
            return bad("shape axes must be positive");
        }
        if !(self.exponent > 0.0) {
            return bad("exponent must be positive");
        }
        if self.fg_mean == self.bg_mean {
            return bad("foreground and background means must differ");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("deformation_mm", self.deformation_mm),
            ("affine_shift_mm", self.affine_shift_mm),
            ("residual_mm", self.residual_mm),
            ("texture_amp", self.texture_amp),
        ] {
            if !(v >= 0.0) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.bias_amp) {
            return bad("bias_amp must lie in [0, 1)");
        }
        if !(self.smoothness_mm > 0.0) {
            return bad("smoothness_mm must be positive");
        }
        // keeps every warp invertible by fixed-point iteration
        let lipschitz = warp_lipschitz(self.deformation_mm, self.smoothness_mm);
        if lipschitz >= 0.9 {
            return bad(&format!("warp too strong for its smoothness (Lipschitz bound {lipschitz:.2})"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut row = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        row("dims", fmt3(&self.dims));
        row("spacing", fmt3(&self.spacing));
        row("center_mm", fmt3(&self.center_mm));
        row("axes_mm", fmt3(&self.axes_mm));
        row("exponent", self.exponent.to_string());
        row("bend", self.bend.to_string());
        row("distractor_offset_mm", fmt3(&self.distractor_offset_mm));
        row("distractor_axes_mm", fmt3(&self.distractor_axes_mm));
        row("distractor_mean", self.distractor_mean.to_string());
        row("deformation_mm", self.deformation_mm.to_string());
        row("smoothness_mm", self.smoothness_mm.to_string());
        row("affine_shift_mm", self.affine_shift_mm.to_string());
        row("fg_mean", self.fg_mean.to_string());
        row("bg_mean", self.bg_mean.to_string());
        row("texture_amp", self.texture_amp.to_string());
        row("noise_sigma", self.noise_sigma.to_string());
        row("bias_amp", self.bias_amp.to_string());
        row("residual_mm", self.residual_mm.to_string());
        row("seed", self.seed.to_string());
        s
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_key_values(text)? {
            let key = k.as_str();
            match key {
                "dims" => s.dims = parse3(key, &v)?,
                "spacing" => s.spacing = parse3(key, &v)?,
                "center_mm" => s.center_mm = parse3(key, &v)?,
                "axes_mm" => s.axes_mm = parse3(key, &v)?,
                "exponent" => s.exponent = parse_value(key, &v)?,
                "bend" => s.bend = parse_value(key, &v)?,
                "distractor_offset_mm" => s.distractor_offset_mm = parse3(key, &v)?,
                "distractor_axes_mm" => s.distractor_axes_mm = parse3(key, &v)?,
                "distractor_mean" => s.distractor_mean = parse_value(key, &v)?,
                "deformation_mm" => s.deformation_mm = parse_value(key, &v)?,
                "smoothness_mm" => s.smoothness_mm = parse_value(key, &v)?,
                "affine_shift_mm" => s.affine_shift_mm = parse_value(key, &v)?,
                "fg_mean" => s.fg_mean = parse_value(key, &v)?,
                "bg_mean" => s.bg_mean = parse_value(key, &v)?,
                "texture_amp" => s.texture_amp = parse_value(key, &v)?,
                "noise_sigma" => s.noise_sigma = parse_value(key, &v)?,
                "bias_amp" => s.bias_amp = parse_value(key, &v)?,
                "residual_mm" => s.residual_mm = parse_value(key, &v)?,
                "seed" => s.seed = parse_value(key, &v)?,
                other => return Err(Error::Config(format!("unknown phantom key '{other}'"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    fn inside_shape(&self, b: [f64; 3]) -> bool {
        let r = [b[0] - self.center_mm[0], b[1] - self.center_mm[1], b[2] - self.center_mm[2]];
        let y = r[1] - self.bend * r[0] * r[0];
        let e = self.exponent;
        (r[0] / self.axes_mm[0]).abs().powf(e) + (y / self.axes_mm[1]).abs().powf(e) + (r[2] / self.axes_mm[2]).abs().powf(e)
            < 1.0
    }

    fn inside_distractor(&self, b: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((b[a] - self.center_mm[a] - self.distractor_offset_mm[a]) / self.distractor_axes_mm[a]).powi(2))
            .sum::<f64>()
            < 1.0
    }
}

/// Upper bound on the Lipschitz constant of a warp with harmonics of
/// amplitude `a/h²` and wavelength `λ/h`.
fn warp_lipschitz(amplitude: f64, smoothness: f64) -> f64 {
    let per_component: f64 =
        (1..=HARMONICS).map(|h| amplitude / (h * h) as f64 * 2.0 * std::f64::consts::PI * h as f64 / smoothness).sum();
    per_component * 3f64.sqrt()
}

/// splitmix64 finalizer, used to derive independent RNG streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ a) ^ b.wrapping_mul(0x2545_F491_4F6C_DD1D)))
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    amp: f64,
    k: [f64; 3],
    phase: f64,
}

/// Band-limited displacement: per component, a sum of plane sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidField {
    terms: [Vec<Term>; 3],
}

impl SinusoidField {
    fn random(rng: &mut ChaCha8Rng, amplitude: f64, smoothness: f64) -> Self {
        let mut comp = || {
            (1..=HARMONICS)
                .map(|h| {
                    let dir = random_direction(rng);
                    let w = 2.0 * std::f64::consts::PI * h as f64 / smoothness;
                    Term {
                        amp: amplitude / (h * h) as f64,
                        k: dir.map(|d| d * w),
                        phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                    }
                })
                .collect::<Vec<_>>()
        };
        Self { terms: [comp(), comp(), comp()] }
    }

    pub fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        let c = |ts: &[Term]| ts.iter().map(|t| t.amp * (t.k[0] * p[0] + t.k[1] * p[1] + t.k[2] * p[2] + t.phase).sin()).sum();
        [c(&self.terms[0]), c(&self.terms[1]), c(&self.terms[2])]
    }

    fn sample(&self, g: &Geometry) -> [Vec<f64>; 3] {
        let vals: Vec<[f64; 3]> = (0..g.len()).into_par_iter().map(|i| self.eval(g.physical(g.coords(i)))).collect();
        [0, 1, 2].map(|a| vals.iter().map(|v| v[a]).collect())
    }
}

/// Trilinear sample of `data` at continuous index `c`, clamped to the grid.
fn sample_clamped(data: &[f64], g: &Geometry, c: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (g.dims[a] - 1) as f64);
        let f = (x.floor() as usize).min(g.dims[a].saturating_sub(2));
        i0[a] = f;
        t[a] = x - f as f64;
    }
    let at = |dx: usize, dy: usize, dz: usize| {
        let i = (i0[0] + dx).min(g.dims[0] - 1);
        let j = (i0[1] + dy).min(g.dims[1] - 1);
        let k = (i0[2] + dz).min(g.dims[2] - 1);
        data[g.index(i, j, k)]
    };
    let lerp = |a: f64, b: f64, s: f64| a + s * (b - a);
    let x00 = lerp(at(0, 0, 0), at(1, 0, 0), t[0]);
    let x10 = lerp(at(0, 1, 0), at(1, 1, 0), t[0]);
    let x01 = lerp(at(0, 0, 1), at(1, 0, 1), t[0]);
    let x11 = lerp(at(0, 1, 1), at(1, 1, 1), t[0]);
    lerp(lerp(x00, x10, t[1]), lerp(x01, x11, t[1]), t[2])
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub intensity: Volume,
    pub labels: LabelMap,
    /// Common space to native space.
    pub affine: AffineTransform,
    pub warp: SinusoidField,
    /// `u` sampled on the common grid.
    forward: [Vec<f64>; 3],
    /// `v` with `x + v(x) = (id + u)⁻¹(x)` on the common grid.
    inverse: [Vec<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: PhantomSpec,
    pub common: Geometry,
    pub subjects: Vec<PhantomSubject>,
}

/// Generates `n ≥ 3` subjects; deterministic for a fixed spec.
pub fn generate_cohort(spec: &PhantomSpec, n: usize) -> Result<Cohort> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::InvalidInput(format!("a cohort needs at least 3 subjects, got {n}")));
    }
    let common = spec.geometry()?;
    let mut trng = stream(spec.seed, 0, 0);
    let texture: Vec<Term> = (0..3)
        .map(|_| Term {
            amp: spec.texture_amp / 3.0,
            k: random_direction(&mut trng).map(|d| d * 2.0 * std::f64::consts::PI / TEXTURE_WAVELENGTH_MM),
            phase: trng.random_range(0.0..2.0 * std::f64::consts::PI),
        })
        .collect();
    let subjects = (0..n)
        .into_par_iter()
        .map(|s| generate_subject(spec, &common, &texture, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { spec: spec.clone(), common, subjects })
}

/// Solves `c + u(c) = x` by fixed-point iteration from `start`.
fn invert(warp: &SinusoidField, x: [f64; 3], start: [f64; 3]) -> [f64; 3] {
    let mut c = start;
    for _ in 0..INVERSION_MAX_ITER {
        let u = warp.eval(c);
        let next = [x[0] - u[0], x[1] - u[1], x[2] - u[2]];
        let step = (0..3).map(|a| (next[a] - c[a]).abs()).fold(0.0, f64::max);
        c = next;
        if step < INVERSION_TOLERANCE {
            break;
        }
    }
    c
}

fn generate_subject(spec: &PhantomSpec, g: &Geometry, texture: &[Term], s: usize) -> Result<PhantomSubject> {
    let mut rng = stream(spec.seed, 1, s as u64);
    let warp = SinusoidField::random(&mut rng, spec.deformation_mm, spec.smoothness_mm);
    let mut shift = [0.0; 3];
    for a in 0..3 {
        let m = (spec.affine_shift_mm / spec.spacing[a] + 1e-9).floor() as i64;
        shift[a] = rng.random_range(-m..=m) as f64 * spec.spacing[a];
    }
    let affine = AffineTransform::translation(shift);
    let bias_c: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let norm: f64 = bias_c.iter().map(|c| c.abs()).sum();
    let extent: [f64; 3] = [0, 1, 2].map(|a| (g.dims[a] - 1) as f64 * g.spacing[a]);

    // anatomy at native voxel q: base(c + u(c)) with c = q - shift
    let samples: Vec<(bool, f64)> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let q = g.physical(g.coords(i));
            let c = [q[0] - shift[0], q[1] - shift[1], q[2] - shift[2]];
            let u = warp.eval(c);
            let b = [c[0] + u[0], c[1] + u[1], c[2] + u[2]];
            let fg = spec.inside_shape(b);
            let mean = if fg {
                spec.fg_mean
            } else if spec.inside_distractor(b) {
                spec.distractor_mean
            } else {
                spec.bg_mean
            };
            let tex: f64 = texture.iter().map(|t| t.amp * (t.k[0] * b[0] + t.k[1] * b[1] + t.k[2] * b[2] + t.phase).sin()).sum();
            let lin: f64 = if norm > 0.0 {
                (0..3).map(|a| bias_c[a] * (2.0 * q[a] / extent[a] - 1.0)).sum::<f64>() / norm
            } else {
                0.0
            };
            (fg, (mean + tex) * (1.0 + spec.bias_amp * lin))
        })
        .collect();
    let mut values: Vec<f64> = samples.iter().map(|s| s.1).collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut nrng = stream(spec.seed, 2, s as u64);
        for v in &mut values {
            *v += normal.sample(&mut nrng);
        }
    }
    let labels = LabelMap::new(*g, samples.iter().map(|s| s.0).collect())?;
    if labels.count() == 0 {
        return Err(Error::Degenerate(format!("subject {s}: structure lies outside the grid")));
    }
    let forward = warp.sample(g);
    let inv: Vec<[f64; 3]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let x = g.physical(g.coords(i));
            let c = invert(&warp, x, x);
            [c[0] - x[0], c[1] - x[1], c[2] - x[2]]
        })
        .collect();
    let inverse = [0, 1, 2].map(|a| inv.iter().map(|v| v[a]).collect());
    Ok(PhantomSubject {
        id: format!("s{s:02}"),
        intensity: Volume::new(*g, values)?,
        labels,
        affine,
        warp,
        forward,
        inverse,
    })
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Exact field from `target` to `atlas` on the common grid:
    /// `d(p) = (id + u_a)⁻¹(p + u_t(p)) - p`. The stored inverse, sampled
    /// trilinearly, is refined by iteration only where it misses by more
    /// than `FIELD_TOLERANCE_MM` (mostly off-grid points).
    pub fn true_field(&self, target: usize, atlas: usize) -> Result<DisplacementField> {
        self.check(target, atlas)?;
        let g = self.common;
        let t = &self.subjects[target];
        let a = &self.subjects[atlas];
        let vals: Vec<[f64; 3]> = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let p = g.physical(g.coords(i));
                let x = [0, 1, 2].map(|k| p[k] + t.forward[k][i]);
                let ci = g.continuous_index(x);
                let start = [0, 1, 2].map(|k| x[k] + sample_clamped(&a.inverse[k], &g, ci));
                let u = a.warp.eval(start);
                let miss = (0..3).map(|k| (start[k] + u[k] - x[k]).abs()).fold(0.0, f64::max);
                let y = if miss < FIELD_TOLERANCE_MM { start } else { invert(&a.warp, x, start) };
                [0, 1, 2].map(|k| y[k] - p[k])
            })
            .collect();
        DisplacementField::new(g, [0, 1, 2].map(|ax| vals.iter().map(|v| v[ax]).collect()))
    }

    /// The exact field plus a smooth perturbation of exactly `residual_mm`
    /// RMS over the grid, as an imperfect registration would produce.
    pub fn registration_field(&self, target: usize, atlas: usize, residual_mm: f64) -> Result<DisplacementField> {
        if !(residual_mm >= 0.0) {
            return Err(Error::InvalidInput("residual must be non-negative".into()));
        }
        let exact = self.true_field(target, atlas)?;
        if residual_mm == 0.0 {
            return Ok(exact);
        }
        let g = self.common;
        let mut rng = stream(self.spec.seed, 3, (target * self.len() + atlas) as u64);
        let raw = SinusoidField::random(&mut rng, 1.0, self.spec.smoothness_mm).sample(&g);
        let rms = ((0..g.len()).map(|i| (0..3).map(|a| raw[a][i] * raw[a][i]).sum::<f64>()).sum::<f64>() / g.len() as f64).sqrt();
        if !(rms > 0.0) {
            return Err(Error::Degenerate("residual field vanished".into()));
        }
        let s = residual_mm / rms;
        DisplacementField::new(g, [0, 1, 2].map(|a| exact.component(a).iter().zip(&raw[a]).map(|(e, r)| e + s * r).collect()))
    }

    fn check(&self, target: usize, atlas: usize) -> Result<()> {
        if target >= self.len() || atlas >= self.len() {
            return Err(Error::InvalidInput(format!("subject index out of range ({target}, {atlas})")));
        }
        Ok(())
    }

    /// Target image and library for leave-one-out fold `target`.
    pub fn fold(&self, target: usize, residual_mm: f64) -> Result<(TargetImage, Vec<AtlasCase>)> {
        self.check(target, target)?;
        let t = &self.subjects[target];
        let image = TargetImage { intensity: t.intensity.clone(), affine: t.affine, common: self.common, truth: Some(t.labels.clone()) };
        let atlases = (0..self.len())
            .filter(|&a| a != target)
            .map(|a| {
                let s = &self.subjects[a];
                Ok(AtlasCase {
                    id: s.id.clone(),
                    intensity: s.intensity.clone(),
                    labels: s.labels.clone(),
                    affine: s.affine,
                    field: Some(self.registration_field(target, a, residual_mm)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((image, atlases))
    }

    /// Writes every subject (`<id>.nii`, `<id>_labels.nii`,
    /// `<id>_affine.txt`), the phantom spec, and for each index in `targets` the
    /// fields towards every other subject plus `manifest_<id>.csv`.
    pub fn write(&self, dir: &Path, targets: &[usize]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.spec.write(&dir.join("phantom.spec"))?;
        for s in &self.subjects {
            write_volume(&dir.join(format!("{}.nii", s.id)), &s.intensity)?;
            write_labels(&dir.join(format!("{}_labels.nii", s.id)), &s.labels)?;
            write_affine(&dir.join(format!("{}_affine.txt", s.id)), &s.affine)?;
        }
        for &t in targets {
            self.check(t, t)?;
            let tid = &self.subjects[t].id;
            let fdir = dir.join(format!("fields_{tid}"));
            std::fs::create_dir_all(&fdir)?;
            let mut entries = Vec::new();
            for a in (0..self.len()).filter(|&a| a != t) {
                let s = &self.subjects[a];
                let fpath = fdir.join(format!("{}.nii", s.id));
                write_displacement(&fpath, &self.registration_field(t, a, self.spec.residual_mm)?)?;
                entries.push(ManifestEntry {
                    id: s.id.clone(),
                    intensity_path: dir.join(format!("{}.nii", s.id)),
                    label_path: dir.join(format!("{}_labels.nii", s.id)),
                    affine_path: Some(dir.join(format!("{}_affine.txt", s.id))),
                    dfield_path: Some(fpath),
                });
            }
            write_manifest(&dir.join(format!("manifest_{tid}.csv")), &entries)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooRow {
    pub fold: usize,
    pub target: String,
    pub method: Method,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    /// Sample standard deviation (0 for a single fold).
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone)]
pub struct LooResults {
    pub rows: Vec<LooRow>,
    pub omega: Vec<(usize, OmegaReport)>,
    pub warnings: Vec<String>,
}

impl LooResults {
    pub fn summary(&self) -> Vec<MethodSummary> {
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let d: Vec<f64> = self.rows.iter().filter(|r| r.method == m).map(|r| r.dice).collect();
                let n = d.len() as f64;
                let mean = d.iter().sum::<f64>() / n;
                let std = if d.len() > 1 { (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
                MethodSummary { method: m, mean, std, folds: d.len() }
            })
            .collect()
    }

    pub fn mean_dice(&self, m: Method) -> Option<f64> {
        self.summary().into_iter().find(|s| s.method == m).map(|s| s.mean)
    }

    /// `fold,target,method,dice`.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,target,method,dice\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.fold, r.target, r.method, r.dice).expect("string write");
        }
        s
    }

    /// One row per method: `method,mean,std,folds`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,mean,std,folds\n");
        for m in self.summary() {
            writeln!(s, "{},{:.4},{:.4},{}", m.method, m.mean, m.std, m.folds).expect("string write");
        }
        s
    }
}

/// Runs every fold of the cohort with each subject as target once.
pub fn leave_one_out(cohort: &Cohort, config: &PipelineConfig, methods: &[Method], residual_mm: f64) -> Result<LooResults> {
    let folds = (0..cohort.len())
        .into_par_iter()
        .map(|t| {
            let (target, atlases) = cohort.fold(t, residual_mm)?;
            run_case(&target, &atlases, config, methods)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut omega = Vec::new();
    let mut warnings = Vec::new();
    for (t, out) in folds.into_iter().enumerate() {
        let id = cohort.subjects[t].id.clone();
        for &m in methods {
            // whole-structure Dice: every roi of the fold pooled
            let truth = &cohort.subjects[t].labels;
            let dice = crate::volume::dice(&out.labels[&m], truth)?;
            rows.push(LooRow { fold: t, target: id.clone(), method: m, dice });
        }
        omega.extend(out.omega.into_iter().map(|o| (t, o)));
        for w in out.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }
    Ok(LooResults { rows, omega, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{dice, signed_distance, transfer_labels_logodds, FieldThenAffine};

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [48, 36, 40],
            center_mm: [20.0, 16.0, 20.0],
            axes_mm: [12.0, 5.0, 5.0],
            distractor_offset_mm: [15.0, 3.0, 0.0],
            distractor_axes_mm: [4.0, 4.0, 4.0],
            ..PhantomSpec::default()
        }
    }

    fn transfer(c: &Cohort, t: usize, a: usize, residual: f64) -> LabelMap {
        let f = c.registration_field(t, a, residual).unwrap();
        let s = &c.subjects[a];
        let common = transfer_labels_logodds(
            &signed_distance(&s.labels).unwrap(),
            &FieldThenAffine { field: Some(&f), affine: &s.affine },
            &c.common,
        )
        .unwrap();
        // into the target's native space (integer shift)
        let tg = &c.subjects[t];
        let v = crate::volume::resample(
            &common.to_volume(),
            &tg.affine.inverse().unwrap(),
            &c.common,
            crate::volume::Interpolation::Nearest,
            0.0,
        )
        .unwrap();
        LabelMap::threshold(&v, 0.5)
    }

    #[test]
    fn spec_text_round_trip() {
        let s = PhantomSpec { seed: 42, residual_mm: 0.75, dims: [40, 30, 20], ..PhantomSpec::default() };
        assert_eq!(PhantomSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(PhantomSpec::from_text("bogus = 1").is_err());
        assert!(PhantomSpec::from_text("dims = 1,2").is_err());
        assert!(PhantomSpec::from_text("fg_mean = 70\nbg_mean = 70").is_err());
        assert!(PhantomSpec::from_text("noise_sigma = -1").is_err());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate_cohort(&small_spec(), 3).unwrap();
        let b = generate_cohort(&small_spec(), 3).unwrap();
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.intensity, y.intensity);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.affine, y.affine);
        }
        assert!(generate_cohort(&small_spec(), 2).is_err());
        let other = generate_cohort(&PhantomSpec { seed: 2, ..small_spec() }, 3).unwrap();
        assert_ne!(other.subjects[0].intensity, a.subjects[0].intensity);
    }

    #[test]
    fn inverse_warp_is_accurate() {
        let c = generate_cohort(&small_spec(), 3).unwrap();
        let s = &c.subjects[1];
        let g = c.common;
        for i in (0..g.len()).step_by(997) {
            let x = g.physical(g.coords(i));
            let y = [x[0] + s.inverse[0][i], x[1] + s.inverse[1][i], x[2] + s.inverse[2][i]];
            let u = s.warp.eval(y);
            for a in 0..3 {
                assert!((y[a] + u[a] - x[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn composed_fields_are_exact() {
        // continuous check: the anatomy the target sees at p is the anatomy
        // the atlas sees at p + d(p)
        let c = generate_cohort(&small_spec(), 4).unwrap();
        let g = c.common;
        for (t, a) in [(0, 1), (2, 3), (3, 0)] {
            let d = c.true_field(t, a).unwrap();
            let (ut, ua) = (&c.subjects[t].warp, &c.subjects[a].warp);
            let mut worst: f64 = 0.0;
            for i in (0..g.len()).step_by(101) {
                let p = g.physical(g.coords(i));
                let y = [0, 1, 2].map(|k| p[k] + d.component(k)[i]);
                let (u, v) = (ut.eval(p), ua.eval(y));
                for k in 0..3 {
                    worst = worst.max((p[k] + u[k] - y[k] - v[k]).abs());
                }
            }
            assert!(worst < FIELD_TOLERANCE_MM, "fold {t} atlas {a}: {worst}");
        }
    }

    #[test]
    fn composed_fields_transfer_labels() {
        // boundary sampling alone limits the discrete round trip
        let c = generate_cohort(&PhantomSpec::default(), 4).unwrap();
        for (t, a) in [(0, 1), (2, 3), (3, 0)] {
            let d = dice(&transfer(&c, t, a, 0.0), &c.subjects[t].labels).unwrap();
            assert!(d >= 0.95, "fold {t} atlas {a}: {d}");
        }
    }

    #[test]
    fn residual_has_requested_rms() {
        let c = generate_cohort(&small_spec(), 3).unwrap();
        let exact = c.true_field(0, 1).unwrap();
        let noisy = c.registration_field(0, 1, 1.5).unwrap();
        let n = c.common.len();
        let rms = ((0..n)
            .map(|i| (0..3).map(|a| (noisy.component(a)[i] - exact.component(a)[i]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!((rms - 1.5).abs() < 1e-9);
    }

    #[test]
    fn degenerate_cohort_is_identical() {
        let spec = PhantomSpec { ..PhantomSpec::degenerate() };
        let c = generate_cohort(&PhantomSpec { dims: [48, 36, 40], center_mm: [20.0, 16.0, 20.0], ..spec }, 3).unwrap();
        for s in &c.subjects[1..] {
            assert_eq!(s.intensity, c.subjects[0].intensity);
            assert_eq!(s.labels, c.subjects[0].labels);
        }
        assert_eq!(transfer(&c, 0, 2, 0.0), c.subjects[0].labels);
    }

    #[test]
    fn minimal_cohort_runs_with_clamping() {
        let c = generate_cohort(&small_spec(), 3).unwrap();
        let cfg = PipelineConfig { n_r: 2, n_a: 2, ..Default::default() };
        let res = leave_one_out(&c, &cfg, &[Method::Mv, Method::Combined], 1.5).unwrap();
        assert_eq!(res.rows.len(), 6);
        assert!(res.rows.iter().all(|r| r.dice > 0.3 && r.dice <= 1.0));
        let csv = res.summary_csv();
        assert!(csv.starts_with("method,mean,std,folds\nmv,"));
    }

    #[test]
    fn identical_cohort_gives_perfect_majority() {
        let spec = PhantomSpec { dims: [48, 36, 40], center_mm: [20.0, 16.0, 20.0], ..PhantomSpec::degenerate() };
        let c = generate_cohort(&spec, 3).unwrap();
        let res = leave_one_out(&c, &PipelineConfig::default(), &[Method::Mv], 0.0).unwrap();
        let s = &res.summary()[0];
        assert_eq!((s.mean, s.std), (1.0, 0.0));
    }
}

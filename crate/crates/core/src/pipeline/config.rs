//! Flat `key = value` configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filters::FilterBankKind;
use crate::fusion::DEFAULT_PRIOR_EXPONENT;
use crate::knn::DEFAULT_K;
use crate::patch::{PatchConfig, PatchMode};
use crate::similarity::DEFAULT_MI_BINS;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value.to_ascii_lowercase().as_str() {
        "" | "auto" | "none" => Ok(None),
        _ => parse_value(key, value).map(Some),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mv,
    Staple,
    Wv,
    Crf,
    Patch,
    Combined,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Mv, Method::Staple, Method::Wv, Method::Crf, Method::Patch, Method::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mv => "mv",
            Method::Staple => "staple",
            Method::Wv => "wv",
            Method::Crf => "crf",
            Method::Patch => "patch",
            Method::Combined => "combined",
        }
    }

    /// Parses a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(out)
    }
}

impl Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mv" | "majority" => Ok(Method::Mv),
            "staple" => Ok(Method::Staple),
            "wv" | "weighted" => Ok(Method::Wv),
            "crf" => Ok(Method::Crf),
            "patch" | "conventional" => Ok(Method::Patch),
            "combined" => Ok(Method::Combined),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// How the structure is split into independently processed regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiMode {
    Single,
    /// Split at the middle of the x axis (left/right structures).
    Hemispheres,
}

impl FromStr for RoiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(RoiMode::Single),
            "hemispheres" | "lr" => Ok(RoiMode::Hemispheres),
            other => Err(Error::Config(format!("unknown roi mode '{other}'"))),
        }
    }
}

impl Display for RoiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoiMode::Single => "single",
            RoiMode::Hemispheres => "hemispheres",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_r: usize,
    pub n_a: usize,
    pub method: Method,
    pub lambda: f64,
    /// `None` picks the voxel-shape default.
    pub c: Option<f64>,
    pub q: f64,
    pub k: usize,
    pub epsilon: f64,
    pub r_p: f64,
    pub r_s: f64,
    pub beta_i: f64,
    pub beta_s: f64,
    pub eps_i: f64,
    pub eps_s: f64,
    pub bins: usize,
    /// `None` picks the bank from the voxel shape.
    pub filter_bank: Option<FilterBankKind>,
    pub rois: RoiMode,
    /// Context kept around the structure when cropping.
    pub margin_mm: f64,
    /// Draw patch candidates from the non-rigidly warped atlases instead of
    /// the affinely aligned ones.
    pub patch_nonrigid: bool,
    pub target: Option<PathBuf>,
    pub target_affine: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PatchConfig::default();
        Self {
            n_r: 15,
            n_a: 10,
            method: Method::Combined,
            lambda: crate::crf::DEFAULT_LAMBDA,
            c: None,
            q: DEFAULT_PRIOR_EXPONENT,
            k: DEFAULT_K,
            epsilon: p.epsilon,
            r_p: p.patch_radius_mm,
            r_s: p.search_radius_mm,
            beta_i: p.beta_i,
            beta_s: p.beta_s,
            eps_i: p.eps_i,
            eps_s: p.eps_s,
            bins: DEFAULT_MI_BINS,
            filter_bank: None,
            rois: RoiMode::Single,
            margin_mm: 10.0,
            patch_nonrigid: false,
            target: None,
            target_affine: None,
            library: None,
            truth: None,
            output: None,
            metrics: None,
        }
    }
}

fn opt_display<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn path_display(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_r" => self.n_r = parse_value(key, value)?,
            "n_a" => self.n_a = parse_value(key, value)?,
            "method" => self.method = value.parse()?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "c" => self.c = parse_optional(key, value)?,
            "q" => self.q = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "r_p" => self.r_p = parse_value(key, value)?,
            "r_s" => self.r_s = parse_value(key, value)?,
            "beta_i" => self.beta_i = parse_value(key, value)?,
            "beta_s" => self.beta_s = parse_value(key, value)?,
            "eps_i" => self.eps_i = parse_value(key, value)?,
            "eps_s" => self.eps_s = parse_value(key, value)?,
            "bins" => self.bins = parse_value(key, value)?,
            "filter_bank" => self.filter_bank = parse_optional(key, value)?,
            "rois" => self.rois = value.parse()?,
            "margin_mm" => self.margin_mm = parse_value(key, value)?,
            "patch_nonrigid" => self.patch_nonrigid = parse_value(key, value)?,
            "target" => self.target = parse_path(value),
            "target_affine" => self.target_affine = parse_path(value),
            "library" => self.library = parse_path(value),
            "truth" => self.truth = parse_path(value),
            "output" => self.output = parse_path(value),
            "metrics" => self.metrics = parse_path(value),
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.n_r == 0 || self.n_a == 0 {
            return bad("n_r and n_a must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if let Some(c) = self.c {
            if !(0.0..=1.0).contains(&c) {
                return bad("c must lie in [0, 1]");
            }
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.q > 0.0) {
            return bad("q must be positive");
        }
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        if !(self.margin_mm >= 0.0) {
            return bad("margin_mm must be non-negative");
        }
        self.patch_config(PatchMode::Combined).validate()
    }

    pub fn patch_config(&self, mode: PatchMode) -> PatchConfig {
        PatchConfig {
            patch_radius_mm: self.r_p,
            search_radius_mm: self.r_s,
            epsilon: self.epsilon,
            beta_i: self.beta_i,
            beta_s: self.beta_s,
            eps_i: self.eps_i,
            eps_s: self.eps_s,
            mode,
        }
    }

    /// Every field as `key = value`, in declaration order.
    pub fn echo(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("n_r", self.n_r.to_string()),
            ("n_a", self.n_a.to_string()),
            ("method", self.method.to_string()),
            ("lambda", self.lambda.to_string()),
            ("c", opt_display(&self.c)),
            ("q", self.q.to_string()),
            ("k", self.k.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("r_p", self.r_p.to_string()),
            ("r_s", self.r_s.to_string()),
            ("beta_i", self.beta_i.to_string()),
            ("beta_s", self.beta_s.to_string()),
            ("eps_i", self.eps_i.to_string()),
            ("eps_s", self.eps_s.to_string()),
            ("bins", self.bins.to_string()),
            ("filter_bank", opt_display(&self.filter_bank.map(bank_name))),
            ("rois", self.rois.to_string()),
            ("margin_mm", self.margin_mm.to_string()),
            ("patch_nonrigid", self.patch_nonrigid.to_string()),
            ("target", path_display(&self.target)),
            ("target_affine", path_display(&self.target_affine)),
            ("library", path_display(&self.library)),
            ("truth", path_display(&self.truth)),
            ("output", path_display(&self.output)),
            ("metrics", path_display(&self.metrics)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn bank_name(k: FilterBankKind) -> &'static str {
    match k {
        FilterBankKind::Gaussian12 => "gaussian12",
        FilterBankKind::Steerable16 => "steerable16",
    }
}

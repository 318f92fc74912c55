//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.
//! [`RunConfig::render`] writes every key, so a rendered config fully
//! determines a run.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::infer::TileOptions;
use crate::network::{ArchConfig, Variant};
use crate::train::TrainHyper;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub train: TrainHyper,
    pub tile: usize,
    pub overlap: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Classes left out of the mean F1.
    pub f1_exclude: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tiles = TileOptions::default();
        RunConfig {
            variant: Variant::Lanet,
            arch: ArchConfig::default(),
            train: TrainHyper::default(),
            tile: tiles.tile,
            overlap: tiles.overlap,
            data: None,
            out: None,
            f1_exclude: Vec::new(),
        }
    }
}

pub const KEYS: [&str; 25] = [
    "variant",
    "in_channels",
    "num_classes",
    "widths",
    "head_width",
    "low_stage",
    "pam_high_patch",
    "pam_low_patch",
    "aem_patch",
    "reduction",
    "aux_weight",
    "lr",
    "momentum",
    "weight_decay",
    "lr_decay_every",
    "lr_decay_gamma",
    "steps",
    "batch",
    "crop",
    "seed",
    "tile",
    "overlap",
    "data",
    "out",
    "f1_exclude",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn patch(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW, got `{v}`")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "in_channels" => self.arch.in_channels = num(key, v)?,
            "num_classes" => self.arch.num_classes = num(key, v)?,
            "widths" => {
                let w = list(key, v)?;
                self.arch.widths = w
                    .try_into()
                    .map_err(|w: Vec<usize>| Error::Config(format!("`widths`: expected 4 values, got {}", w.len())))?;
            }
            "head_width" => self.arch.head_width = num(key, v)?,
            "low_stage" => self.arch.low_stage = num(key, v)?,
            "pam_high_patch" => self.arch.pam_high_patch = patch(key, v)?,
            "pam_low_patch" => self.arch.pam_low_patch = patch(key, v)?,
            "aem_patch" => self.arch.aem_patch = patch(key, v)?,
            "reduction" => self.arch.reduction = num(key, v)?,
            "aux_weight" => self.arch.aux_weight = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "lr_decay_every" => self.train.lr_decay_every = num(key, v)?,
            "lr_decay_gamma" => self.train.lr_decay_gamma = num(key, v)?,
            "steps" => self.train.steps = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "crop" => self.train.crop = num(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "tile" => self.tile = num(key, v)?,
            "overlap" => self.overlap = num(key, v)?,
            "data" => self.data = path(v),
            "out" => self.out = path(v),
            "f1_exclude" => self.f1_exclude = list(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (valid: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate(&self.arch, self.variant)?;
        if let Some(&k) = self.f1_exclude.iter().find(|&&k| k >= self.arch.num_classes) {
            return Err(Error::Config(format!("f1_exclude class {k} out of range")));
        }
        Ok(())
    }

    pub fn tiles(&self) -> TileOptions {
        TileOptions {
            tile: self.tile,
            overlap: self.overlap,
            parallel: false,
        }
    }

    /// Every key in canonical order; `parse(render())` is the identity.
    pub fn render(&self) -> String {
        let a = &self.arch;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let p = |p: (usize, usize)| format!("{}x{}", p.0, p.1);
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", self.variant.tag().into());
        kv("in_channels", a.in_channels.to_string());
        kv("num_classes", a.num_classes.to_string());
        kv("widths", join(&a.widths));
        kv("head_width", a.head_width.to_string());
        kv("low_stage", a.low_stage.to_string());
        kv("pam_high_patch", p(a.pam_high_patch));
        kv("pam_low_patch", p(a.pam_low_patch));
        kv("aem_patch", p(a.aem_patch));
        kv("reduction", a.reduction.to_string());
        kv("aux_weight", format!("{:?}", a.aux_weight));
        kv("lr", format!("{:?}", t.lr));
        kv("momentum", format!("{:?}", t.momentum));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("lr_decay_gamma", format!("{:?}", t.lr_decay_gamma));
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("crop", t.crop.to_string());
        kv("seed", t.seed.to_string());
        kv("tile", self.tile.to_string());
        kv("overlap", self.overlap.to_string());
        kv("data", opt(&self.data));
        kv("out", opt(&self.out));
        kv("f1_exclude", join(&self.f1_exclude));
        s
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

//! Two-branch local attention network and its ablation variants.
//!
//! A plain stride-16 encoder feeds two branches. The high branch takes the
//! stride-16 features, the low branch the features tapped at `low_stage`.
//! Each branch ends in its own classifier (3x3 conv, ReLU, 1x1 conv) whose
//! logits are upsampled to input resolution; the fused output is their sum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AemConfig, AemParams, GateVars, PamConfig, PamParams, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::{derive_seed, kaiming_uniform};
use crate::tensor::{Scalar, Shape, Tensor};

pub const HIGH_STRIDE: usize = 16;
pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// High-level branch only.
    Fcn,
    /// Both branches, PAM on each.
    FcnPam,
    /// Both branches, AEM on the low one.
    FcnAem,
    /// PAM on both branches, then AEM on the low one.
    Lanet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fcn, Variant::FcnPam, Variant::FcnAem, Variant::Lanet];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::FcnPam => "fcn-pam",
            Variant::FcnAem => "fcn-aem",
            Variant::Lanet => "lanet",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Fcn => "FCN",
            Variant::FcnPam => "FCN+PAM",
            Variant::FcnAem => "FCN+AEM",
            Variant::Lanet => "LANet",
        }
    }

    pub fn has_low_branch(self) -> bool {
        self != Variant::Fcn
    }

    pub fn has_pam(self) -> bool {
        matches!(self, Variant::FcnPam | Variant::Lanet)
    }

    pub fn has_aem(self) -> bool {
        matches!(self, Variant::FcnAem | Variant::Lanet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (valid: fcn, fcn-pam, fcn-aem, lanet)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output widths of the four encoder stages; the stem uses `widths[0]`.
    pub widths: [usize; STAGES],
    /// Hidden width of each branch classifier.
    pub head_width: usize,
    /// 1-based stage whose output feeds the low branch (stride `2^low_stage`).
    pub low_stage: usize,
    pub pam_high_patch: (usize, usize),
    pub pam_low_patch: (usize, usize),
    pub aem_patch: (usize, usize),
    pub reduction: usize,
    /// Weight of each auxiliary per-branch loss.
    pub aux_weight: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 4,
            num_classes: 6,
            widths: [32, 64, 96, 128],
            head_width: 64,
            low_stage: 2,
            pam_high_patch: (4, 4),
            pam_low_patch: (8, 8),
            aem_patch: (2, 2),
            reduction: DEFAULT_REDUCTION,
            aux_weight: 0.4,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl ArchConfig {
    /// Widths 8/16/24/32, for tests and gradient checks.
    pub fn tiny() -> Self {
        ArchConfig {
            widths: [8, 16, 24, 32],
            ..ArchConfig::default()
        }
    }

    pub fn high_stride(&self) -> usize {
        HIGH_STRIDE
    }

    pub fn low_stride(&self) -> usize {
        1 << self.low_stage
    }

    pub fn c_low(&self) -> usize {
        self.widths[self.low_stage - 1]
    }

    pub fn c_high(&self) -> usize {
        self.widths[STAGES - 1]
    }

    pub fn pam_high(&self) -> PamConfig {
        PamConfig::new(self.c_high(), self.pam_high_patch, self.reduction)
    }

    pub fn pam_low(&self) -> PamConfig {
        PamConfig::new(self.c_low(), self.pam_low_patch, self.reduction)
    }

    pub fn aem(&self) -> AemConfig {
        let ratio = HIGH_STRIDE / self.low_stride();
        AemConfig {
            high_patch: self.aem_patch,
            reduction: self.reduction,
            c_high: self.c_high(),
            c_low: self.c_low(),
            upsample: (ratio * self.aem_patch.0, ratio * self.aem_patch.1),
        }
    }

    /// Input sizes must be multiples of this (in both axes) for `variant`.
    pub fn input_quantum(&self, variant: Variant) -> (usize, usize) {
        let mut q = (HIGH_STRIDE, HIGH_STRIDE);
        let mut fold = |p: (usize, usize), stride: usize| {
            q = (lcm(q.0, p.0 * stride), lcm(q.1, p.1 * stride));
        };
        if variant.has_pam() {
            fold(self.pam_high_patch, HIGH_STRIDE);
            fold(self.pam_low_patch, self.low_stride());
        }
        if variant.has_aem() {
            fold(self.aem_patch, HIGH_STRIDE);
        }
        q
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.num_classes < 2 || self.head_width == 0 {
            return bad("in_channels, head_width must be positive and num_classes >= 2".into());
        }
        if self.num_classes > 255 {
            return bad(format!("num_classes {} exceeds 255", self.num_classes));
        }
        if self.widths.contains(&0) {
            return bad(format!("stage widths {:?} must be positive", self.widths));
        }
        if !(1..STAGES).contains(&self.low_stage) {
            return bad(format!("low_stage {} must be in 1..={}", self.low_stage, STAGES - 1));
        }
        for (name, p) in [
            ("pam_high_patch", self.pam_high_patch),
            ("pam_low_patch", self.pam_low_patch),
            ("aem_patch", self.aem_patch),
        ] {
            if p.0 == 0 || p.1 == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.reduction == 0 {
            return bad("reduction must be positive".into());
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("aux_weight {} must be >= 0", self.aux_weight));
        }
        Ok(())
    }
}

/// Named parameter store of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub variant: Variant,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            variant: self.variant,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.param(name.clone(), t.clone())?);
        }
        Ok(vars)
    }
}

fn conv_params<T: Scalar>(
    out: &mut BTreeMap<String, Tensor<T>>,
    prefix: &str,
    shape: [usize; 4],
    seed: u64,
    zero: bool,
) {
    let weight = if zero {
        Tensor::zeros(shape)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, prefix));
        kaiming_uniform(shape, &mut rng)
    };
    out.insert(format!("{prefix}.weight"), weight);
    out.insert(format!("{prefix}.bias"), Tensor::zeros([shape[0], 1, 1, 1]));
}

fn head_params<T: Scalar>(
    out: &mut BTreeMap<String, Tensor<T>>,
    prefix: &str,
    c_in: usize,
    arch: &ArchConfig,
    seed: u64,
) {
    conv_params(
        out,
        &format!("{prefix}.conv"),
        [arch.head_width, c_in, 3, 3],
        seed,
        false,
    );
    conv_params(
        out,
        &format!("{prefix}.cls"),
        [arch.num_classes, arch.head_width, 1, 1],
        seed,
        true,
    );
}

/// Fresh parameters of `variant`. Every tensor draws from its own stream,
/// so shared tensors are identical across variants built from one seed.
/// Conv weights are Kaiming-uniform, biases zero, the final classifier
/// layers zero.
pub fn build_variant<T: Scalar>(variant: Variant, arch: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut t = BTreeMap::new();
    conv_params(
        &mut t,
        "backbone.stem",
        [arch.widths[0], arch.in_channels, 3, 3],
        seed,
        false,
    );
    let mut c_in = arch.widths[0];
    for (i, &w) in arch.widths.iter().enumerate() {
        let stage = i + 1;
        conv_params(
            &mut t,
            &format!("backbone.stage{stage}.conv1"),
            [w, c_in, 3, 3],
            seed,
            false,
        );
        conv_params(
            &mut t,
            &format!("backbone.stage{stage}.conv2"),
            [w, w, 3, 3],
            seed,
            false,
        );
        c_in = w;
    }
    head_params(&mut t, "head_high", arch.c_high(), arch, seed);
    if variant.has_low_branch() {
        head_params(&mut t, "head_low", arch.c_low(), arch, seed);
    }
    if variant.has_pam() {
        for (prefix, cfg) in [("pam_high", arch.pam_high()), ("pam_low", arch.pam_low())] {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, prefix));
            t.extend(PamParams::<T>::init(&cfg, &mut rng).named(prefix));
        }
    }
    if variant.has_aem() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "aem"));
        t.extend(AemParams::<T>::init(&arch.aem(), &mut rng).named("aem"));
    }
    Ok(ModelParams { variant, tensors: t })
}

/// Parameter names `build_variant` produces for `variant`.
pub fn parameter_names(variant: Variant, arch: &ArchConfig) -> Result<Vec<String>> {
    let mut probe = arch.clone();
    probe.widths = [1; STAGES];
    probe.head_width = 1;
    Ok(build_variant::<f32>(variant, &probe, 0)?.tensors.into_keys().collect())
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
}

fn conv_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = var(vars, &format!("{prefix}.weight"))?;
    let b = var(vars, &format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn check_input(s: Shape, arch: &ArchConfig, variant: Variant) -> Result<()> {
    if s.c != arch.in_channels {
        return Err(Error::shape(
            "model",
            format!("image {s} has {} bands, model expects {}", s.c, arch.in_channels),
        ));
    }
    let q = arch.input_quantum(variant);
    if !s.h.is_multiple_of(q.0) || !s.w.is_multiple_of(q.1) {
        return Err(Error::shape(
            "model",
            format!("image {}x{} is not divisible by {}x{}", s.h, s.w, q.0, q.1),
        ));
    }
    Ok(())
}

/// Encoder: stem then four stride-2 stages of two 3x3 conv + ReLU.
/// Returns `(low, high)` features at strides `2^low_stage` and 16.
pub fn backbone<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    arch: &ArchConfig,
    vars: &BTreeMap<String, Var>,
) -> Result<(Var, Var)> {
    let s = g.shape(image);
    if !s.h.is_multiple_of(HIGH_STRIDE) || !s.w.is_multiple_of(HIGH_STRIDE) {
        return Err(Error::shape(
            "backbone",
            format!("image {}x{} is not divisible by {HIGH_STRIDE}", s.h, s.w),
        ));
    }
    let x = conv_layer(g, image, vars, "backbone.stem", 1, 1)?;
    let mut x = g.relu(x);
    let mut low = None;
    for stage in 1..=STAGES {
        let y = conv_layer(g, x, vars, &format!("backbone.stage{stage}.conv1"), 2, 1)?;
        let y = g.relu(y);
        let y = conv_layer(g, y, vars, &format!("backbone.stage{stage}.conv2"), 1, 1)?;
        x = g.relu(y);
        if stage == arch.low_stage {
            low = Some(x);
        }
    }
    let low = low.ok_or_else(|| Error::Config(format!("low_stage {} out of range", arch.low_stage)))?;
    Ok((low, x))
}

fn head<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    upsample: usize,
) -> Result<Var> {
    let h = conv_layer(g, x, vars, &format!("{prefix}.conv"), 1, 1)?;
    let h = g.relu(h);
    let logits = conv_layer(g, h, vars, &format!("{prefix}.cls"), 1, 0)?;
    g.upsample_nearest(logits, (upsample, upsample))
}

/// Full-resolution logits of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub fused: Var,
    pub high: Var,
    pub low: Option<Var>,
}

pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    arch: &ArchConfig,
    variant: Variant,
    vars: &BTreeMap<String, Var>,
) -> Result<Logits> {
    check_input(g.shape(image), arch, variant)?;
    let (low, high) = backbone(g, image, arch, vars)?;

    let high = if variant.has_pam() {
        let p = GateVars::lookup(vars, "pam_high", "increase")?;
        attention::pam(g, high, &p, &arch.pam_high())?
    } else {
        high
    };
    let high_logits = head(g, high, vars, "head_high", HIGH_STRIDE)?;
    if !variant.has_low_branch() {
        return Ok(Logits {
            fused: high_logits,
            high: high_logits,
            low: None,
        });
    }

    let mut low = low;
    if variant.has_pam() {
        let p = GateVars::lookup(vars, "pam_low", "increase")?;
        low = attention::pam(g, low, &p, &arch.pam_low())?;
    }
    if variant.has_aem() {
        let p = GateVars::lookup(vars, "aem", "project")?;
        low = attention::aem(g, low, high, &p, &arch.aem())?;
    }
    let low_logits = head(g, low, vars, "head_low", arch.low_stride())?;
    let fused = g.add(high_logits, low_logits)?;
    Ok(Logits {
        fused,
        high: high_logits,
        low: Some(low_logits),
    })
}

/// Training objective `(CE(fused) + aux * sum CE(branch)) / (1 + aux * branches)`.
/// Auxiliary terms apply only to two-branch variants; the normalisation keeps
/// the value at `ln K` for all-zero logits.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: &Logits,
    labels: &[u8],
    ignore: Option<u8>,
    aux_weight: f64,
) -> Result<Var> {
    let fused = g.softmax_cross_entropy(logits.fused, labels, ignore)?;
    let Some(low) = logits.low.filter(|_| aux_weight > 0.0) else {
        return Ok(fused);
    };
    let ce_high = g.softmax_cross_entropy(logits.high, labels, ignore)?;
    let ce_low = g.softmax_cross_entropy(low, labels, ignore)?;
    let aux = g.add(ce_high, ce_low)?;
    let aux = g.scale(aux, T::from_f64(aux_weight));
    let total = g.add(fused, aux)?;
    Ok(g.scale(total, T::from_f64(1.0 / (1.0 + 2.0 * aux_weight))))
}

pub fn backbone_forward<T: Scalar>(
    image: &Tensor<T>,
    arch: &ArchConfig,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if image.shape().c != arch.in_channels {
        return Err(Error::shape(
            "backbone",
            format!(
                "image {} has {} bands, model expects {}",
                image.shape(),
                image.shape().c,
                arch.in_channels
            ),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let vars = params.bind(&mut g)?;
    let (low, high) = backbone(&mut g, x, arch, &vars)?;
    Ok((g.value(low).clone(), g.value(high).clone()))
}

/// `(fused, high, low)` logits at input resolution.
pub fn model_forward<T: Scalar>(
    image: &Tensor<T>,
    arch: &ArchConfig,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let vars = params.bind(&mut g)?;
    let l = forward(&mut g, x, arch, params.variant, &vars)?;
    Ok((
        g.value(l.fused).clone(),
        g.value(l.high).clone(),
        l.low.map(|v| g.value(v).clone()),
    ))
}

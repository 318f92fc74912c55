//! Patch attention (PAM), attention embedding (AEM), and the
//! squeeze-and-excitation block that PAM reduces to with a single patch.
//!
//! Both attention modules squeeze a feature map into per-patch channel
//! descriptors by non-overlapping average pooling, pass the descriptor grid
//! through a 1x1 bottleneck (reduce, ReLU, expand, sigmoid), replicate the
//! resulting attention back onto the target map with nearest upsampling, and
//! apply it residually: `out = x + x * A`. Since `A` lies in `(0, 1)`, every
//! nonzero element is scaled by a factor strictly between 1 and 2.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::kaiming_uniform;
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;
pub const MIN_REDUCED_CHANNELS: usize = 4;

/// Bottleneck width: `max(channels / reduction, 4)`.
pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(MIN_REDUCED_CHANNELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PamConfig {
    /// `(h_p, w_p)` in feature-map pixels.
    pub patch: (usize, usize),
    pub reduction: usize,
    pub channels: usize,
}

impl PamConfig {
    pub fn new(channels: usize, patch: (usize, usize), reduction: usize) -> Self {
        PamConfig {
            patch,
            reduction,
            channels,
        }
    }

    pub fn reduced(&self) -> usize {
        reduced_channels(self.channels, self.reduction)
    }

    /// Descriptor grid for an `h x w` map.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.patch;
        if ph == 0 || pw == 0 || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) {
            return Err(Error::shape(
                "pam",
                format!("patch {ph}x{pw} does not tile a {h}x{w} feature map"),
            ));
        }
        Ok((h / ph, w / pw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AemConfig {
    /// Descriptor window on the high-level map.
    pub high_patch: (usize, usize),
    pub reduction: usize,
    pub c_high: usize,
    pub c_low: usize,
    /// Factors taking the descriptor grid to the low-level map size.
    pub upsample: (usize, usize),
}

impl AemConfig {
    pub fn reduced(&self) -> usize {
        reduced_channels(self.c_high, self.reduction)
    }

    /// Checks that the high-level descriptor grid upsampled by `upsample`
    /// lands exactly on the low-level map.
    pub fn check_dims(&self, high: (usize, usize), low: (usize, usize)) -> Result<()> {
        let (ph, pw) = self.high_patch;
        if ph == 0 || pw == 0 || !high.0.is_multiple_of(ph) || !high.1.is_multiple_of(pw) {
            return Err(Error::shape(
                "aem",
                format!("patch {ph}x{pw} does not tile a {}x{} high-level map", high.0, high.1),
            ));
        }
        let computed = (high.0 / ph * self.upsample.0, high.1 / pw * self.upsample.1);
        if computed != low {
            return Err(Error::shape(
                "aem",
                format!(
                    "descriptor grid {}x{} upsampled by {}x{} gives {}x{}, but the low-level map is {}x{}",
                    high.0 / ph,
                    high.1 / pw,
                    self.upsample.0,
                    self.upsample.1,
                    computed.0,
                    computed.1,
                    low.0,
                    low.1
                ),
            ));
        }
        Ok(())
    }
}

/// Weights of a 1x1 bottleneck: `reduce` then `expand`.
#[derive(Debug, Clone, PartialEq)]
struct Bottleneck<T> {
    w_reduce: Tensor<T>,
    b_reduce: Tensor<T>,
    w_expand: Tensor<T>,
    b_expand: Tensor<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn zeros(c_in: usize, c_mid: usize, c_out: usize) -> Self {
        Bottleneck {
            w_reduce: Tensor::zeros([c_mid, c_in, 1, 1]),
            b_reduce: Tensor::zeros([c_mid, 1, 1, 1]),
            w_expand: Tensor::zeros([c_out, c_mid, 1, 1]),
            b_expand: Tensor::zeros([c_out, 1, 1, 1]),
        }
    }

    fn init<R: Rng + ?Sized>(c_in: usize, c_mid: usize, c_out: usize, rng: &mut R) -> Self {
        Bottleneck {
            w_reduce: kaiming_uniform([c_mid, c_in, 1, 1], rng),
            b_reduce: Tensor::zeros([c_mid, 1, 1, 1]),
            w_expand: kaiming_uniform([c_out, c_mid, 1, 1], rng),
            b_expand: Tensor::zeros([c_out, 1, 1, 1]),
        }
    }

    fn named(&self, prefix: &str, expand: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.reduce.weight"), self.w_reduce.clone()),
            (format!("{prefix}.reduce.bias"), self.b_reduce.clone()),
            (format!("{prefix}.{expand}.weight"), self.w_expand.clone()),
            (format!("{prefix}.{expand}.bias"), self.b_expand.clone()),
        ]
    }

    fn bind(&self, g: &mut Graph<T>, prefix: &str, expand: &str) -> Result<GateVars> {
        let mut it = self.named(prefix, expand).into_iter();
        let mut next = |g: &mut Graph<T>| {
            let (name, t) = it.next().expect("four tensors");
            g.param(name, t)
        };
        Ok(GateVars {
            w_reduce: next(g)?,
            b_reduce: next(g)?,
            w_expand: next(g)?,
            b_expand: next(g)?,
        })
    }

    fn numel(&self) -> usize {
        self.w_reduce.len() + self.b_reduce.len() + self.w_expand.len() + self.b_expand.len()
    }
}

/// Graph handles of a bottleneck's four tensors.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_reduce: Var,
    pub b_reduce: Var,
    pub w_expand: Var,
    pub b_expand: Var,
}

impl GateVars {
    /// Looks up `{prefix}.reduce.{weight,bias}` and `{prefix}.{expand}.{weight,bias}`.
    pub fn lookup(vars: &BTreeMap<String, Var>, prefix: &str, expand: &str) -> Result<Self> {
        let get = |k: String| {
            vars.get(&k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{k}`")))
        };
        Ok(GateVars {
            w_reduce: get(format!("{prefix}.reduce.weight"))?,
            b_reduce: get(format!("{prefix}.reduce.bias"))?,
            w_expand: get(format!("{prefix}.{expand}.weight"))?,
            b_expand: get(format!("{prefix}.{expand}.bias"))?,
        })
    }
}

/// sigmoid(expand(relu(reduce(z)))).
fn gate<T: Scalar>(g: &mut Graph<T>, z: Var, p: &GateVars) -> Result<Var> {
    let r = g.conv2d(z, p.w_reduce, Some(p.b_reduce), 1, 0)?;
    let r = g.relu(r);
    let e = g.conv2d(r, p.w_expand, Some(p.b_expand), 1, 0)?;
    Ok(g.sigmoid(e))
}

fn check_channels(op: &'static str, x: Shape, expected: usize) -> Result<()> {
    if x.c != expected {
        return Err(Error::shape(
            op,
            format!("input {x} has {} channels, expected {expected}", x.c),
        ));
    }
    Ok(())
}

/// `x + x * A` where `A = upsample(gate(avg_pool(x)))`.
pub fn pam<T: Scalar>(g: &mut Graph<T>, x: Var, p: &GateVars, cfg: &PamConfig) -> Result<Var> {
    let s = g.shape(x);
    check_channels("pam", s, cfg.channels)?;
    cfg.grid(s.h, s.w)?;
    let z = g.avg_pool2d(x, cfg.patch)?;
    let a = gate(g, z, p)?;
    let a = g.upsample_nearest(a, cfg.patch)?;
    let xa = g.mul(x, a)?;
    g.add(x, xa)
}

/// `x_low + x_low * A_l` where `A_l = upsample(gate(avg_pool(x_high)))`.
pub fn aem<T: Scalar>(g: &mut Graph<T>, x_low: Var, x_high: Var, p: &GateVars, cfg: &AemConfig) -> Result<Var> {
    let (sl, sh) = (g.shape(x_low), g.shape(x_high));
    check_channels("aem (low-level)", sl, cfg.c_low)?;
    check_channels("aem (high-level)", sh, cfg.c_high)?;
    if sl.n != sh.n {
        return Err(Error::ShapeMismatch {
            op: "aem",
            lhs: sl,
            rhs: sh,
        });
    }
    cfg.check_dims((sh.h, sh.w), (sl.h, sl.w))?;
    let z = g.avg_pool2d(x_high, cfg.high_patch)?;
    let a = gate(g, z, p)?;
    let a = g.upsample_nearest(a, cfg.upsample)?;
    let xa = g.mul(x_low, a)?;
    g.add(x_low, xa)
}

/// Squeeze-and-excitation: `x * gate(global_avg(x))`, no residual.
pub fn se<T: Scalar>(g: &mut Graph<T>, x: Var, p: &GateVars, channels: usize) -> Result<Var> {
    let s = g.shape(x);
    check_channels("se", s, channels)?;
    let z = g.avg_pool2d(x, (s.h, s.w))?;
    let a = gate(g, z, p)?;
    let a = g.upsample_nearest(a, (s.h, s.w))?;
    g.mul(x, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamParams<T> {
    inner: Bottleneck<T>,
}

impl<T: Scalar> PamParams<T> {
    pub fn zeros(cfg: &PamConfig) -> Self {
        PamParams {
            inner: Bottleneck::zeros(cfg.channels, cfg.reduced(), cfg.channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &PamConfig, rng: &mut R) -> Self {
        PamParams {
            inner: Bottleneck::init(cfg.channels, cfg.reduced(), cfg.channels, rng),
        }
    }

    pub fn from_tensors(
        w_reduce: Tensor<T>,
        b_reduce: Tensor<T>,
        w_increase: Tensor<T>,
        b_increase: Tensor<T>,
    ) -> Self {
        PamParams {
            inner: Bottleneck {
                w_reduce,
                b_reduce,
                w_expand: w_increase,
                b_expand: b_increase,
            },
        }
    }

    pub fn w_reduce(&self) -> &Tensor<T> {
        &self.inner.w_reduce
    }
    pub fn b_reduce(&self) -> &Tensor<T> {
        &self.inner.b_reduce
    }
    pub fn w_increase(&self) -> &Tensor<T> {
        &self.inner.w_expand
    }
    pub fn b_increase(&self) -> &Tensor<T> {
        &self.inner.b_expand
    }

    /// Parameters under `{prefix}.reduce.*` and `{prefix}.increase.*`.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.inner.named(prefix, "increase")
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> Result<GateVars> {
        self.inner.bind(g, prefix, "increase")
    }

    pub fn numel(&self) -> usize {
        self.inner.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AemParams<T> {
    inner: Bottleneck<T>,
}

impl<T: Scalar> AemParams<T> {
    pub fn zeros(cfg: &AemConfig) -> Self {
        AemParams {
            inner: Bottleneck::zeros(cfg.c_high, cfg.reduced(), cfg.c_low),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &AemConfig, rng: &mut R) -> Self {
        AemParams {
            inner: Bottleneck::init(cfg.c_high, cfg.reduced(), cfg.c_low, rng),
        }
    }

    pub fn from_tensors(w_reduce: Tensor<T>, b_reduce: Tensor<T>, w_project: Tensor<T>, b_project: Tensor<T>) -> Self {
        AemParams {
            inner: Bottleneck {
                w_reduce,
                b_reduce,
                w_expand: w_project,
                b_expand: b_project,
            },
        }
    }

    pub fn w_reduce(&self) -> &Tensor<T> {
        &self.inner.w_reduce
    }
    pub fn b_reduce(&self) -> &Tensor<T> {
        &self.inner.b_reduce
    }
    pub fn w_project(&self) -> &Tensor<T> {
        &self.inner.w_expand
    }
    pub fn b_project(&self) -> &Tensor<T> {
        &self.inner.b_expand
    }

    /// Parameters under `{prefix}.reduce.*` and `{prefix}.project.*`.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.inner.named(prefix, "project")
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> Result<GateVars> {
        self.inner.bind(g, prefix, "project")
    }

    pub fn numel(&self) -> usize {
        self.inner.numel()
    }
}

pub fn pam_forward<T: Scalar>(x: &Tensor<T>, params: &PamParams<T>, cfg: &PamConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let p = params.bind(&mut g, "pam")?;
    let out = pam(&mut g, xv, &p, cfg)?;
    Ok(g.value(out).clone())
}

pub fn aem_forward<T: Scalar>(
    x_low: &Tensor<T>,
    x_high: &Tensor<T>,
    params: &AemParams<T>,
    cfg: &AemConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let lo = g.input(x_low.clone());
    let hi = g.input(x_high.clone());
    let p = params.bind(&mut g, "aem")?;
    let out = aem(&mut g, lo, hi, &p, cfg)?;
    Ok(g.value(out).clone())
}

pub fn se_forward<T: Scalar>(x: &Tensor<T>, params: &PamParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let p = params.bind(&mut g, "se")?;
    let channels = params.w_increase().shape().n;
    let out = se(&mut g, xv, &p, channels)?;
    Ok(g.value(out).clone())
}

/// The per-pixel attention map `A` that [`pam`] multiplies into its input.
pub fn pam_attention<T: Scalar>(x: &Tensor<T>, params: &PamParams<T>, cfg: &PamConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let p = params.bind(&mut g, "pam")?;
    check_channels("pam", x.shape(), cfg.channels)?;
    cfg.grid(x.shape().h, x.shape().w)?;
    let z = g.avg_pool2d(xv, cfg.patch)?;
    let a = gate(&mut g, z, &p)?;
    let a = g.upsample_nearest(a, cfg.patch)?;
    Ok(g.value(a).clone())
}

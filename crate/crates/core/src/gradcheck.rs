//! Central finite-difference gradient checking in f64.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{aem, pam, AemConfig, AemParams, GateVars, PamConfig, PamParams, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{self, build_variant, ArchConfig, Variant};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which coordinates of each tensor are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// At most this many per tensor, drawn without replacement from a seeded stream.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

/// The coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    /// Coordinates whose every probe straddled a ReLU kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<F>(inputs: &BTreeMap<String, Tensor<f64>>, f: &F) -> Result<(Graph<f64>, Var)>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut vars = BTreeMap::new();
    for (name, t) in inputs {
        vars.insert(name.clone(), g.param(name.clone(), t.clone())?);
    }
    let loss = f(&mut g, &vars)?;
    Ok((g, loss))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences for every selected coordinate.
///
/// The estimate is the Richardson-extrapolated central difference
/// `(4 D(h/2) - D(h)) / 3`, `D(h) = (f(x + h) - f(x - h)) / 2h`, whose
/// truncation error is `O(h^4)` while its rounding error is of order
/// `ulp(loss) / h`; a large step is therefore preferred. A difference
/// straddling a ReLU kink measures the average of two one-sided slopes
/// rather than the derivative, so the step starts at `1000 eps` and is
/// shrunk tenfold, down to `eps / 100`, while any probe flips the sign of
/// some ReLU input. A coordinate with no kink-free step is skipped and
/// counted in [`GradCheckReport::skipped`].
pub fn grad_check<F>(
    inputs: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    coords: Coordinates,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let (g, loss) = evaluate(inputs, &f)?;
    let analytic = g.backward(loss)?;
    let pattern = g.relu_pattern();
    drop(g);

    let mut work = inputs.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (ti, (name, tensor)) in inputs.iter().enumerate() {
        let len = tensor.len();
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..len).collect(),
            Coordinates::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64));
                let mut v = sample(&mut rng, len, per_tensor.min(len)).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in picks {
            let base = tensor.data()[i];
            let mut probe = |delta: f64| -> Result<(f64, bool)> {
                work.get_mut(name).expect("name").data_mut()[i] = base + delta;
                let (g, l) = evaluate(&work, &f)?;
                Ok((g.value(l).item()?, g.relu_pattern() == pattern))
            };
            let mut numeric = None;
            for k in [3, 2, 1, 0, -1, -2] {
                let h = eps * 10f64.powi(k);
                let mut diff = |d: f64| -> Result<Option<f64>> {
                    let (plus, sp) = probe(d)?;
                    let (minus, sm) = probe(-d)?;
                    Ok((sp && sm).then(|| (plus - minus) / (2.0 * d)))
                };
                let Some(full) = diff(h)? else { continue };
                let Some(half) = diff(h / 2.0)? else { continue };
                numeric = Some((4.0 * half - full) / 3.0);
                break;
            }
            work.get_mut(name).expect("name").data_mut()[i] = base;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[name].data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check at `{name}`[{i}]: analytic {a}, numeric {numeric}"
                )));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst {
                    tensor: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries
/// a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(g.shape(out).dims(), &mut rng, 1.0);
    let r = g.input(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// PAM on a `1 x 8 x 8 x 8` input with 4x4 patches, random gating weights,
/// every coordinate checked.
pub fn check_pam(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PamConfig::new(8, (4, 4), DEFAULT_REDUCTION);
    let mut inputs: BTreeMap<String, Tensor<f64>> = PamParams::<f64>::init(&cfg, &mut rng)
        .named("pam")
        .into_iter()
        .map(|(k, t)| (k, randomize_zeros(t, &mut rng)))
        .collect();
    inputs.insert("x".into(), random_tensor([1, 8, 8, 8], &mut rng, 1.0));
    grad_check(&inputs, DEFAULT_EPS, Coordinates::All, |g, v| {
        let p = GateVars::lookup(v, "pam", "increase")?;
        let out = pam(g, v["x"], &p, &cfg)?;
        weighted_sum(g, out, seed ^ 0x5eed)
    })
}

/// AEM with a `1 x 8 x 8 x 8` low-level map and a `1 x 12 x 2 x 2`
/// high-level map, every coordinate checked.
pub fn check_aem(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AemConfig {
        high_patch: (1, 1),
        reduction: DEFAULT_REDUCTION,
        c_high: 12,
        c_low: 8,
        upsample: (4, 4),
    };
    let mut inputs: BTreeMap<String, Tensor<f64>> = AemParams::<f64>::init(&cfg, &mut rng)
        .named("aem")
        .into_iter()
        .map(|(k, t)| (k, randomize_zeros(t, &mut rng)))
        .collect();
    inputs.insert("x_low".into(), random_tensor([1, 8, 8, 8], &mut rng, 1.0));
    inputs.insert("x_high".into(), random_tensor([1, 12, 2, 2], &mut rng, 1.0));
    grad_check(&inputs, DEFAULT_EPS, Coordinates::All, |g, v| {
        let p = GateVars::lookup(v, "aem", "project")?;
        let out = aem(g, v["x_low"], v["x_high"], &p, &cfg)?;
        weighted_sum(g, out, seed ^ 0x5eed)
    })
}

/// Full training loss of a `variant` at the tiny architecture on a
/// `1 x 4 x 64 x 64` input. Zero-initialised tensors (biases and
/// classifiers) are randomised so that every path carries gradient;
/// `per_tensor` coordinates are sampled from each tensor and the image.
pub fn check_model(variant: Variant, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let arch = ArchConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build_variant::<f64>(variant, &arch, seed)?;
    let mut inputs: BTreeMap<String, Tensor<f64>> = params
        .tensors
        .into_iter()
        .map(|(k, t)| (k, randomize_zeros(t, &mut rng)))
        .collect();
    inputs.insert(
        "image".into(),
        random_tensor([1, arch.in_channels, 64, 64], &mut rng, 1.0),
    );
    let labels: Vec<u8> = (0..64 * 64).map(|_| rng.gen_range(0..arch.num_classes as u8)).collect();
    grad_check(
        &inputs,
        DEFAULT_EPS,
        Coordinates::Sample { per_tensor, seed },
        |g, v| {
            let logits = network::forward(g, v["image"], &arch, variant, v)?;
            network::loss(g, &logits, &labels, None, arch.aux_weight)
        },
    )
}

/// Replaces an all-zero tensor by small random values.
fn randomize_zeros(t: Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    if t.data().iter().any(|&v| v != 0.0) {
        return t;
    }
    random_tensor(t.shape().dims(), rng, 0.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let inputs = BTreeMap::from([("x".to_string(), Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap())]);
        let report = grad_check(&inputs, DEFAULT_EPS, Coordinates::All, |g, v| {
            let sq = g.mul(v["x"], v["x"])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn non_finite_values_name_the_coordinate() {
        let inputs = BTreeMap::from([(
            "x".to_string(),
            Tensor::from_vec([1, 1, 1, 2], vec![1.0, f64::NAN]).unwrap(),
        )]);
        let err = grad_check(&inputs, DEFAULT_EPS, Coordinates::All, |g, v| Ok(g.sum(v["x"]))).unwrap_err();
        assert!(err.to_string().contains("`x`[0]"), "{err}");
    }
}

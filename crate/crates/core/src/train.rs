//! Training loop and split evaluation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Augmentation, RasterSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::{predict_tiled, predict_whole, TileOptions};
use crate::init::derive_seed;
use crate::label::{stack_labels, LabelMap};
use crate::metrics::ConfusionMatrix;
use crate::network::{self, build_variant, ArchConfig, ModelParams, Variant};
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    /// Multiply the learning rate by `lr_decay_gamma` every this many steps; 0 keeps it fixed.
    pub lr_decay_every: usize,
    pub lr_decay_gamma: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            batch: 4,
            crop: 512,
            seed: 0,
            lr_decay_every: 0,
            lr_decay_gamma: 0.1,
        }
    }
}

impl TrainHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        match step.checked_div(self.lr_decay_every) {
            Some(k) => self.lr * self.lr_decay_gamma.powi(k as i32),
            None => self.lr,
        }
    }

    pub fn validate(&self, arch: &ArchConfig, variant: Variant) -> Result<()> {
        let (qh, qw) = arch.input_quantum(variant);
        if self.crop == 0 || !self.crop.is_multiple_of(qh) || !self.crop.is_multiple_of(qw) {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of {}x{} for {}",
                self.crop,
                qh,
                qw,
                variant.tag()
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay_gamma > 0.0) {
            return Err(Error::Config(format!(
                "lr {} and lr_decay_gamma {} must be non-negative and positive",
                self.lr, self.lr_decay_gamma
            )));
        }
        Ok(())
    }
}

/// One training log record, printed as `step<TAB>loss<TAB>lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6e}", self.step, self.loss, self.lr)
    }
}

/// A batch of `hyper.batch` augmented crops drawn from `samples`.
pub fn draw_batch<R: Rng>(
    samples: &[RasterSample],
    crop: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut images = Vec::with_capacity(batch);
    let mut labels: Vec<LabelMap> = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = &samples[rng.gen_range(0..samples.len())];
        let a = Augmentation::draw(rng, s.height(), s.width(), crop)?.apply(s)?;
        images.push(a.image);
        labels.push(a.labels);
    }
    Ok((Tensor::stack(&images)?, stack_labels(&labels)?))
}

/// Loss and gradients of one batch.
pub fn loss_and_grads(
    arch: &ArchConfig,
    params: &ModelParams<f32>,
    image: Tensor<f32>,
    labels: &[u8],
) -> Result<(f64, crate::graph::Gradients<f32>)> {
    let mut g = Graph::new();
    let x = g.input(image);
    let vars = params.bind(&mut g)?;
    let logits = network::forward(&mut g, x, arch, params.variant, &vars)?;
    let loss = network::loss(&mut g, &logits, labels, None, arch.aux_weight)?;
    let value = g.value(loss).item()? as f64;
    Ok((value, g.backward(loss)?))
}

/// Trains `variant` from a fresh seed-determined initialisation. `log` sees
/// every step's loss before the update is applied. Single-threaded and
/// bitwise reproducible.
pub fn train(
    samples: &[RasterSample],
    arch: &ArchConfig,
    variant: Variant,
    hyper: &TrainHyper,
    mut log: impl FnMut(&LogLine),
) -> Result<ModelParams<f32>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    hyper.validate(arch, variant)?;
    if let Some(s) = samples.iter().find(|s| s.bands() != arch.in_channels) {
        return Err(Error::InvalidArgument(format!(
            "sample {} has {} bands, model expects {}",
            s.meta.id,
            s.bands(),
            arch.in_channels
        )));
    }
    let mut params = build_variant::<f32>(variant, arch, hyper.seed)?;
    let mut opt = Sgd::new(hyper.momentum, hyper.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "batches"));
    for step in 0..hyper.steps {
        let (image, labels) = draw_batch(samples, hyper.crop, hyper.batch, &mut rng)?;
        let (loss, grads) = loss_and_grads(arch, &params, image, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
        }
        let lr = hyper.lr_at(step);
        log(&LogLine { step, loss, lr });
        opt.step(&mut params.tensors, &grads, lr)?;
    }
    Ok(params)
}

/// Confusion matrix of predictions over `samples`. `tiles` of `None`
/// predicts each image in one pass.
pub fn evaluate(
    arch: &ArchConfig,
    params: &ModelParams<f32>,
    samples: &[RasterSample],
    tiles: Option<TileOptions>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(arch.num_classes);
    for s in samples {
        let pred = match tiles {
            Some(t) => predict_tiled(arch, params, &s.image, t)?,
            None => predict_whole(arch, params, &s.image)?,
        };
        cm.accumulate(&pred, &s.labels, None)?;
    }
    Ok(cm)
}

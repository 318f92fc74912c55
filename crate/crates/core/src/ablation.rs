//! Four-variant ablation: train FCN, FCN+PAM, FCN+AEM and LANet under
//! several seeds and compare their mean test accuracy.

use std::fmt::Write;

use crate::config::RunConfig;
use crate::data::RasterSample;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{ModelParams, Variant};
use crate::train::{evaluate, train, LogLine};

/// Required mean OA gains over FCN, in percentage points.
pub const LANET_MARGIN: f64 = 1.0;
pub const MODULE_MARGIN: f64 = 0.3;
/// A run set whose best variant stays within this many points of the
/// majority-class accuracy has not learned anything to compare.
pub const CHANCE_MARGIN: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    /// Percent.
    pub overall_accuracy: f64,
    /// Percent.
    pub mean_f1: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        }
    }
}

/// Mean and range of one table cell over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Cell {
    fn of(values: &[f64]) -> Cell {
        Cell {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub name: String,
    /// Mean OA difference in points.
    pub gain: f64,
    pub margin: f64,
}

impl TrendCheck {
    pub fn holds(&self) -> bool {
        self.gain >= self.margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub seeds: Vec<u64>,
    /// OA of always predicting the most frequent test class, percent.
    pub chance_oa: f64,
}

impl AblationReport {
    fn values(&self, v: Variant, f: impl Fn(&AblationRun) -> f64) -> Vec<f64> {
        self.runs.iter().filter(|r| r.variant == v).map(f).collect()
    }

    pub fn oa(&self, v: Variant) -> Cell {
        Cell::of(&self.values(v, |r| r.overall_accuracy))
    }

    pub fn mean_f1(&self, v: Variant) -> Cell {
        Cell::of(&self.values(v, |r| r.mean_f1))
    }

    pub fn checks(&self) -> Vec<TrendCheck> {
        let base = self.oa(Variant::Fcn).mean;
        let check = |v: Variant, margin: f64| TrendCheck {
            name: format!("{} - FCN", v.label()),
            gain: self.oa(v).mean - base,
            margin,
        };
        vec![
            check(Variant::Lanet, LANET_MARGIN),
            check(Variant::FcnPam, MODULE_MARGIN),
            check(Variant::FcnAem, MODULE_MARGIN),
        ]
    }

    pub fn verdict(&self) -> Verdict {
        let best = Variant::ALL
            .iter()
            .map(|&v| self.oa(v).mean)
            .fold(f64::NEG_INFINITY, f64::max);
        if best < self.chance_oa + CHANCE_MARGIN {
            Verdict::Inconclusive
        } else if self.checks().iter().all(TrendCheck::holds) {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Per-seed rows, the mean [min, max] table, the trend checks and the verdict.
    pub fn render(&self) -> String {
        let mut s = String::from("variant   seed   mean_f1      OA\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<8} {:>5} {:>9.2} {:>7.2}",
                r.variant.label(),
                r.seed,
                r.mean_f1,
                r.overall_accuracy
            );
        }
        let _ = writeln!(s, "\nmethod    mean_f1 (mean [min, max])   OA (mean [min, max])");
        let cell = |c: Cell| format!("{:6.2} [{:6.2}, {:6.2}]", c.mean, c.min, c.max);
        for v in Variant::ALL {
            let _ = writeln!(
                s,
                "{:<8}  {}     {}",
                v.label(),
                cell(self.mean_f1(v)),
                cell(self.oa(v))
            );
        }
        let _ = writeln!(s, "\nmajority-class OA {:.2}", self.chance_oa);
        for c in self.checks() {
            let _ = writeln!(
                s,
                "{:<14} {:+6.2} (need >= {:.1}) {}",
                c.name,
                c.gain,
                c.margin,
                if c.holds() { "ok" } else { "short" }
            );
        }
        let _ = writeln!(s, "trend {}", self.verdict().as_str());
        s
    }
}

/// OA in percent of predicting the most frequent reference class everywhere.
pub fn majority_oa(samples: &[RasterSample], classes: usize) -> Result<f64> {
    let mut counts = vec![0u64; classes];
    for s in samples {
        for &l in s.labels.data() {
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range")))? += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    Ok(100.0 * *counts.iter().max().expect("classes > 0") as f64 / total as f64)
}

/// Trains every variant under `seeds` (in that order, sequentially) and
/// evaluates each on `test` with whole-image prediction. `progress` sees each
/// finished run and its trained parameters.
pub fn run_ablation(
    cfg: &RunConfig,
    seeds: &[u64],
    train_set: &[RasterSample],
    test: &[RasterSample],
    mut progress: impl FnMut(&AblationRun, &ModelParams<f32>),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("ablation needs a non-empty test split".into()));
    }
    for v in Variant::ALL {
        cfg.train.validate(&cfg.arch, v)?;
    }
    let chance_oa = majority_oa(test, cfg.arch.num_classes)?;
    let mut runs = Vec::with_capacity(seeds.len() * Variant::ALL.len());
    for &seed in seeds {
        for variant in Variant::ALL {
            let start = std::time::Instant::now();
            let hyper = crate::train::TrainHyper {
                seed,
                ..cfg.train.clone()
            };
            let mut final_loss = f64::NAN;
            let params = train(train_set, &cfg.arch, variant, &hyper, |l: &LogLine| final_loss = l.loss)?;
            let cm: ConfusionMatrix = evaluate(&cfg.arch, &params, test, None)?;
            let run = AblationRun {
                variant,
                seed,
                overall_accuracy: 100.0 * cm.overall_accuracy()?,
                mean_f1: 100.0 * cm.f1_scores_excluding(&cfg.f1_exclude)?.mean,
                final_loss,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&run, &params);
            runs.push(run);
        }
    }
    Ok(AblationReport {
        runs,
        seeds: seeds.to_vec(),
        chance_oa,
    })
}

//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//!
//! Lines are written straight to stdout so they show up without
//! `--nocapture`. Criterion 5 trains twelve models and dominates the run
//! time; criterion 8 reuses its seed-0 LANet.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use lanet_core::ablation::{run_ablation, Verdict};
use lanet_core::attention::{aem, aem_forward, pam, pam_forward, se_forward};
use lanet_core::data::synth::generate_scene;
use lanet_core::data::{load_split, synth_generate};
use lanet_core::gradcheck::{check_aem, check_model, check_pam, GradCheckReport};
use lanet_core::infer::{agreement, predict_tiled, predict_whole};
use lanet_core::kernels::{
    avg_pool2d_forward, conv2d_forward, softmax_cross_entropy_forward, upsample_nearest_forward,
};
use lanet_core::network::build_variant;
use lanet_core::train::{draw_batch, loss_and_grads};
use lanet_core::{
    AemConfig, AemParams, ArchConfig, ConfusionMatrix, Graph, LabelMap, ModelParams, PamConfig, PamParams, RunConfig,
    Split, Tensor, TileOptions, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ABLATION_CONF: &str = include_str!("../../../configs/ablation.conf");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0))
}

fn random_labels(len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..classes as u8)).collect()
}

fn random_pam(rng: &mut ChaCha8Rng, max_patch: usize) -> (PamConfig, PamParams<f64>, Tensor<f64>) {
    let c = rng.gen_range(1..12);
    let patch = (rng.gen_range(1..=max_patch), rng.gen_range(1..=max_patch));
    let grid = (rng.gen_range(1..4), rng.gen_range(1..4));
    let cfg = PamConfig::new(c, patch, rng.gen_range(1..20));
    let params = PamParams::from_tensors(
        random([cfg.reduced(), c, 1, 1], rng),
        random([cfg.reduced(), 1, 1, 1], rng),
        random([c, cfg.reduced(), 1, 1], rng),
        random([c, 1, 1, 1], rng),
    );
    let x = random([rng.gen_range(1..3), c, patch.0 * grid.0, patch.1 * grid.1], rng);
    (cfg, params, x)
}

fn random_aem(rng: &mut ChaCha8Rng) -> (AemConfig, AemParams<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = AemConfig {
        high_patch: (rng.gen_range(1..3), rng.gen_range(1..3)),
        reduction: rng.gen_range(1..20),
        c_high: rng.gen_range(1..12),
        c_low: rng.gen_range(1..8),
        upsample: (rng.gen_range(1..5), rng.gen_range(1..5)),
    };
    let r = cfg.reduced();
    let params = AemParams::from_tensors(
        random([r, cfg.c_high, 1, 1], rng),
        random([r, 1, 1, 1], rng),
        random([cfg.c_low, r, 1, 1], rng),
        random([cfg.c_low, 1, 1, 1], rng),
    );
    let (gh, gw) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let n = rng.gen_range(1..3);
    let hi = random([n, cfg.c_high, gh * cfg.high_patch.0, gw * cfg.high_patch.1], rng);
    let lo = random([n, cfg.c_low, gh * cfg.upsample.0, gw * cfg.upsample.1], rng);
    (cfg, params, lo, hi)
}

fn gradcheck_line(name: &str, r: &GradCheckReport) -> String {
    format!(
        "{name} {:.1e} ({} coords, {} skipped)",
        r.max_rel_err, r.checked, r.skipped
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut record = |name: &str, r: GradCheckReport| {
        worst = worst.max(r.max_rel_err);
        parts.push(gradcheck_line(name, &r));
    };
    record("pam", check_pam(0).map_err(|e| e.to_string())?);
    record("aem", check_aem(0).map_err(|e| e.to_string())?);
    for v in Variant::ALL {
        record(v.tag(), check_model(v, 0, 8).map_err(|e| e.to_string())?);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{}; {secs:.1} s", parts.join(", "));
    ensure!(worst < 1e-4, "max rel err {worst:.2e} >= 1e-4: {detail}");
    ensure!(secs < 120.0, "took {secs:.1} s: {detail}");
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    for case in 0..50 {
        let c = r.gen_range(1..24);
        let patch = (r.gen_range(1..5), r.gen_range(1..5));
        let (gh, gw) = (r.gen_range(1..4), r.gen_range(1..4));
        let cfg = PamConfig::new(c, patch, 16);
        let x: Tensor<f32> = random([2, c, gh * patch.0, gw * patch.1], &mut r).cast();
        let out = pam_forward(&x, &PamParams::zeros(&cfg), &cfg).map_err(|e| e.to_string())?;
        ensure!(
            out.data().iter().zip(x.data()).all(|(&o, &v)| o == v * 1.5),
            "case {case}: zero-gated PAM is not 1.5 x"
        );
        let acfg = AemConfig {
            high_patch: patch,
            reduction: 16,
            c_high: c,
            c_low: r.gen_range(1..12),
            upsample: (r.gen_range(1..5), r.gen_range(1..5)),
        };
        let hi: Tensor<f32> = random([2, c, gh * patch.0, gw * patch.1], &mut r).cast();
        let lo: Tensor<f32> = random([2, acfg.c_low, gh * acfg.upsample.0, gw * acfg.upsample.1], &mut r).cast();
        let out = aem_forward(&lo, &hi, &AemParams::zeros(&acfg), &acfg).map_err(|e| e.to_string())?;
        ensure!(
            out.data().iter().zip(lo.data()).all(|(&o, &v)| o == v * 1.5),
            "case {case}: zero-gated AEM is not 1.5 x_low"
        );
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (_, params, x) = random_pam(&mut r, 4);
        let s = x.shape();
        let cfg = PamConfig::new(s.c, (s.h, s.w), 16);
        let params = PamParams::from_tensors(
            params.w_reduce().cast::<f32>(),
            params.b_reduce().cast(),
            params.w_increase().cast(),
            params.b_increase().cast(),
        );
        let x: Tensor<f32> = x.cast();
        let p = pam_forward(&x, &params, &cfg).map_err(|e| e.to_string())?;
        let q = se_forward(&x, &params).map_err(|e| e.to_string())?;
        for ((&a, &b), &v) in p.data().iter().zip(q.data()).zip(x.data()) {
            worst = worst.max(((a - v) - b).abs() as f64);
        }
    }
    ensure!(
        worst <= 1e-6,
        "full-extent PAM minus input differs from SE by {worst:.2e}"
    );
    Ok(format!(
        "zero gating exact on 50 cases; SE limit max err {worst:.1e} over 50 cases"
    ))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn([xs.n, ws.n, oh, ow], |n, o, oy, ox| {
        let mut acc = 0.0;
        for c in 0..xs.c {
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let (iy, ix) = (
                        (oy * stride + ki).wrapping_sub(pad),
                        (ox * stride + kj).wrapping_sub(pad),
                    );
                    if iy < xs.h && ix < xs.w {
                        acc += w.at(o, c, ki, kj) * x.at(n, c, iy, ix);
                    }
                }
            }
        }
        acc + b.data()[o]
    })
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut ce_worst = 0.0f64;
    for case in 0..200 {
        let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..6));
        let (k, stride, pad) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(0..2));
        let (h, w) = (r.gen_range(k..10), r.gen_range(k..10));
        let x = random([n, c, h, w], &mut r);
        let wt = random([o, c, k, k], &mut r);
        let b = random([o, 1, 1, 1], &mut r);
        let got = conv2d_forward(&x, &wt, Some(&b), stride, pad).map_err(|e| e.to_string())?;
        ensure!(
            got == naive_conv(&x, &wt, &b, stride, pad),
            "conv2d case {case} differs"
        );

        let (ph, pw) = (r.gen_range(1..5), r.gen_range(1..5));
        let x = random([n, c, ph * r.gen_range(1..4), pw * r.gen_range(1..4)], &mut r);
        let got = avg_pool2d_forward(&x, ph, pw).map_err(|e| e.to_string())?;
        let want = Tensor::from_fn(got.shape(), |n, c, y, xx| {
            let mut s = 0.0;
            for i in 0..ph {
                for j in 0..pw {
                    s += x.at(n, c, y * ph + i, xx * pw + j);
                }
            }
            s / (ph * pw) as f64
        });
        ensure!(got == want, "avg_pool2d case {case} differs");

        let (kc, hh, ww) = (r.gen_range(2..8), r.gen_range(1..7), r.gen_range(1..7));
        let logits = random([n, kc, hh, ww], &mut r);
        let labels = random_labels(n * hh * ww, kc, &mut r);
        let (loss, _, _) = softmax_cross_entropy_forward(&logits, &labels, None).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for i in 0..n {
            for y in 0..hh {
                for xx in 0..ww {
                    let lse = (0..kc).map(|q| logits.at(i, q, y, xx).exp()).sum::<f64>().ln();
                    total += lse - logits.at(i, labels[(i * hh + y) * ww + xx] as usize, y, xx);
                }
            }
        }
        ce_worst = ce_worst.max((loss - total / (n * hh * ww) as f64).abs());

        let len = r.gen_range(1..400);
        let pred = random_labels(len, kc, &mut r);
        let reference = random_labels(len, kc, &mut r);
        let ignore = r.gen_bool(0.3).then(|| r.gen_range(0..kc as u8));
        let mut cm = ConfusionMatrix::new(kc);
        cm.accumulate(
            &LabelMap::new(1, len, pred.clone()).map_err(|e| e.to_string())?,
            &LabelMap::new(1, len, reference.clone()).map_err(|e| e.to_string())?,
            ignore,
        )
        .map_err(|e| e.to_string())?;
        let mut want = vec![0u64; kc * kc];
        for (&p, &t) in pred.iter().zip(&reference) {
            if Some(t) != ignore {
                want[t as usize * kc + p as usize] += 1;
            }
        }
        ensure!(cm.counts() == &want[..], "confusion case {case} differs");
    }
    ensure!(ce_worst < 1e-10, "cross-entropy off by {ce_worst:.2e}");
    Ok(format!(
        "200 instances each; conv2d, avg_pool2d and confusion exact; CE max err {ce_worst:.1e}"
    ))
}

fn flip(t: &Tensor<f64>, vertical: bool) -> Tensor<f64> {
    if vertical {
        t.flip_vertical()
    } else {
        t.flip_horizontal()
    }
}

/// Flips each of the `n` stacked maps of a `n*h x w` label buffer.
fn flip_labels(l: &[u8], n: usize, h: usize, w: usize, vertical: bool) -> Vec<u8> {
    let mut out = vec![0; l.len()];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
                out[(i * h + y) * w + x] = l[(i * h + sy) * w + sx];
            }
        }
    }
    out
}

fn criterion_4() -> Outcome {
    const CASES: usize = 1000;
    let mut r = rng(4);
    let err = |e: lanet_core::Error| e.to_string();
    let in_band = |out: &Tensor<f64>, x: &Tensor<f64>| {
        out.data()
            .iter()
            .zip(x.data())
            .all(|(&o, &v)| v == 0.0 || (o / v > 1.0 && o / v < 2.0))
    };
    for case in 0..CASES {
        let (cfg, p, x) = random_pam(&mut r, 4);
        let out = pam_forward(&x, &p, &cfg).map_err(err)?;
        ensure!(out.shape() == x.shape(), "PAM case {case} changed the shape");
        ensure!(in_band(&out, &x), "PAM case {case}: residual ratio outside (1, 2)");

        let (acfg, ap, lo, hi) = random_aem(&mut r);
        let aem_out = aem_forward(&lo, &hi, &ap, &acfg).map_err(err)?;
        ensure!(aem_out.shape() == lo.shape(), "AEM case {case} changed the shape");
        ensure!(in_band(&aem_out, &lo), "AEM case {case}: residual ratio outside (1, 2)");

        let s = x.shape();
        let (gy, gx) = (r.gen_range(0..s.h / cfg.patch.0), r.gen_range(0..s.w / cfg.patch.1));
        let mut y2 = x.clone();
        for c in 0..s.c {
            for i in 0..cfg.patch.0 {
                for j in 0..cfg.patch.1 {
                    *y2.at_mut(0, c, gy * cfg.patch.0 + i, gx * cfg.patch.1 + j) += r.gen_range(-1.0..1.0);
                }
            }
        }
        let out2 = pam_forward(&y2, &p, &cfg).map_err(err)?;
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let inside = n == 0 && i / cfg.patch.0 == gy && j / cfg.patch.1 == gx;
                        ensure!(
                            inside || out.at(n, c, i, j).to_bits() == out2.at(n, c, i, j).to_bits(),
                            "PAM case {case}: perturbing patch ({gy}, {gx}) changed pixel ({i}, {j})"
                        );
                    }
                }
            }
        }

        let (fh, fw) = (r.gen_range(1..6), r.gen_range(1..6));
        let up = upsample_nearest_forward(&x, fh, fw).map_err(err)?;
        let back = avg_pool2d_forward(&up, fh, fw).map_err(err)?;
        let tol = (fh * fw) as f64 * f64::EPSILON;
        ensure!(
            back.data()
                .iter()
                .zip(x.data())
                .all(|(&b, &v)| (b - v).abs() <= tol * v.abs()),
            "case {case}: avg_pool(upsample(x)) != x for factors {fh}x{fw}"
        );

        let vertical = r.gen_bool(0.5);
        let use_aem = r.gen_bool(0.5);
        let feat_in = if use_aem { lo.clone() } else { x.clone() };
        let fs = feat_in.shape();
        let classifier = random([6, fs.c, 1, 1], &mut r);
        let labels = random_labels(fs.n * 4 * fs.h * fs.w, 6, &mut r);
        let loss = |x: &Tensor<f64>, hi: &Tensor<f64>, labels: &[u8]| -> Result<f64, String> {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let feat = if use_aem {
                let hv = g.input(hi.clone());
                let vars = ap.bind(&mut g, "aem").map_err(err)?;
                aem(&mut g, xv, hv, &vars, &acfg).map_err(err)?
            } else {
                let vars = p.bind(&mut g, "pam").map_err(err)?;
                pam(&mut g, xv, &vars, &cfg).map_err(err)?
            };
            let w = g.input(classifier.clone());
            let logits = g.conv2d(feat, w, None, 1, 0).map_err(err)?;
            let up = g.upsample_nearest(logits, (2, 2)).map_err(err)?;
            let l = g.softmax_cross_entropy(up, labels, None).map_err(err)?;
            g.value(l).item().map_err(err)
        };
        let base = loss(&feat_in, &hi, &labels)?;
        let flipped = loss(
            &flip(&feat_in, vertical),
            &flip(&hi, vertical),
            &flip_labels(&labels, fs.n, 2 * fs.h, 2 * fs.w, vertical),
        )?;
        ensure!(
            (flipped - base).abs() <= 1e-12 * base.abs().max(1.0),
            "case {case}: flipped loss {flipped} vs {base}"
        );
    }
    Ok(format!(
        "{CASES} cases each: shape, residual ratio, patch locality, pool/upsample, flip-consistent loss; 0 violations"
    ))
}

fn criterion_5(lanet: &mut Option<(ArchConfig, ModelParams<f32>)>) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::parse(ABLATION_CONF).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = synth_generate(7, 200, 128, 4, dir.path()).map_err(|e| e.to_string())?;
    let train_set = load_split(&manifest, &Split::Train).map_err(|e| e.to_string())?;
    let test = load_split(&manifest, &Split::Test).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..3).map(|i| cfg.train.seed + i).collect();
    let report = run_ablation(&cfg, &seeds, &train_set, &test, |run, params| {
        say(&format!(
            "  {:<8} seed {}: OA {:.2} mean F1 {:.2} ({:.0} s)",
            run.variant.label(),
            run.seed,
            run.overall_accuracy,
            run.mean_f1,
            run.seconds
        ));
        if run.variant == Variant::Lanet && run.seed == seeds[0] {
            *lanet = Some((cfg.arch.clone(), params.clone()));
        }
    })
    .map_err(|e| e.to_string())?;
    for line in report.render().lines() {
        say(&format!("  {line}"));
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let gains: Vec<String> = report
        .checks()
        .iter()
        .map(|c| format!("{} {:+.2}", c.name, c.gain))
        .collect();
    let detail = format!("{}; {minutes:.1} min", gains.join(", "));
    ensure!(
        report.verdict() == Verdict::Pass,
        "trend {}: {detail}",
        report.verdict().as_str()
    );
    ensure!(minutes < 60.0, "over the 60 min budget: {detail}");
    Ok(detail)
}

fn criterion_6() -> Outcome {
    // Class 0: 4 hits, 2 misses, 1 false alarm.
    let cm = ConfusionMatrix::from_counts(2, vec![4, 2, 1, 3]).map_err(|e| e.to_string())?;
    let f1 = cm.f1_scores().map_err(|e| e.to_string())?.per_class[0];
    ensure!(
        (f1 - 8.0 / 11.0).abs() < 1e-12,
        "hand case F1 {f1}, expected 0.727272..."
    );

    let mut r = rng(6);
    for case in 0..500 {
        let k = r.gen_range(2..7);
        let (h, w) = (r.gen_range(1..30), r.gen_range(1..30));
        let pred = random_labels(h * w, k, &mut r);
        let reference = random_labels(h * w, k, &mut r);
        let matrix = |p: &[u8], t: &[u8]| -> Result<ConfusionMatrix, String> {
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(
                &LabelMap::new(h, w, p.to_vec()).map_err(|e| e.to_string())?,
                &LabelMap::new(h, w, t.to_vec()).map_err(|e| e.to_string())?,
                None,
            )
            .map_err(|e| e.to_string())?;
            Ok(cm)
        };
        let whole = matrix(&pred, &reference)?;

        let mut perm: Vec<u8> = (0..k as u8).collect();
        for i in (1..k).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let relabel = |v: &[u8]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<u8>>();
        let permuted = matrix(&relabel(&pred), &relabel(&reference))?;
        let (a, b) = (whole.f1_scores().unwrap(), permuted.f1_scores().unwrap());
        ensure!(
            whole.overall_accuracy().unwrap() == permuted.overall_accuracy().unwrap()
                && (0..k).all(|c| a.per_class[c] == b.per_class[perm[c] as usize])
                && (a.mean - b.mean).abs() < 1e-12,
            "case {case}: metrics changed under a class permutation"
        );

        let (cy, cx) = (r.gen_range(0..=h), r.gen_range(0..=w));
        let (pm, rm) = (
            LabelMap::new(h, w, pred).unwrap(),
            LabelMap::new(h, w, reference).unwrap(),
        );
        let mut merged = ConfusionMatrix::new(k);
        for (y0, y1) in [(0, cy), (cy, h)] {
            for (x0, x1) in [(0, cx), (cx, w)] {
                if y1 > y0 && x1 > x0 {
                    let mut part = ConfusionMatrix::new(k);
                    part.accumulate(
                        &pm.crop(y0, x0, y1 - y0, x1 - x0).unwrap(),
                        &rm.crop(y0, x0, y1 - y0, x1 - x0).unwrap(),
                        None,
                    )
                    .map_err(|e| e.to_string())?;
                    merged.merge(&part).map_err(|e| e.to_string())?;
                }
            }
        }
        ensure!(merged == whole, "case {case}: tile matrices do not add up");
    }
    Ok(format!(
        "hand F1 {f1:.6}; permutation and tile additivity hold on 500 cases"
    ))
}

fn lanet(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lanet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "lanet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs synth, train, eval and predict twice with identical arguments and
/// output paths, removing every artifact in between.
fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let (data, ckpt, png) = (p("data"), p("model.ckpt"), p("pred.png"));
    let image = [
        format!("{data}/images/0000_b0.png"),
        format!("{data}/images/0000_b1.png"),
    ];
    let train = [
        "train",
        "--data",
        &data,
        "--variant",
        "lanet",
        "--out",
        &ckpt,
        "--set",
        "steps=4",
        "--set",
        "crop=64",
        "--set",
        "batch=2",
        "--set",
        "widths=8,16,24,32",
        "--set",
        "head_width=16",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&data);
        let synth = lanet(&["synth", "--seed", "5", "--count", "8", "--size", "128", "--out", &data])?;
        let digest = lanet_core::data::dataset_digest(Path::new(&data)).map_err(|e| e.to_string())?;
        let log = lanet(&train)?;
        let eval = lanet(&["eval", "--ckpt", &ckpt, "--data", &data, "--tile", "128"])?;
        lanet(&[
            "predict", "--ckpt", &ckpt, "--image", &image[0], &image[1], "--out", &png, "--tile", "128",
        ])?;
        runs.push((
            synth.stdout,
            digest,
            log.stdout,
            eval.stdout,
            read(Path::new(&ckpt))?,
            read(Path::new(&png))?,
        ));
        std::fs::remove_file(&ckpt).map_err(|e| e.to_string())?;
        std::fs::remove_file(&png).map_err(|e| e.to_string())?;
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure!(a.0 == b.0, "synth reports differ");
    ensure!(a.1 == b.1, "dataset digests differ: {} vs {}", a.1, b.1);
    ensure!(a.2 == b.2, "training logs differ");
    ensure!(a.4 == b.4, "checkpoints differ");
    ensure!(a.3 == b.3, "evaluation reports differ");
    ensure!(a.5 == b.5, "predicted maps differ");
    Ok(format!(
        "dataset digest {}..., training log, checkpoint ({} bytes), report and map identical",
        &a.1[..12],
        a.4.len()
    ))
}

fn criterion_8(model: &Option<(ArchConfig, ModelParams<f32>)>) -> Outcome {
    let Some((arch, params)) = model else {
        return Err("no trained LANet (criterion 5 did not finish)".into());
    };
    let opts = TileOptions::default();
    let mut fractions = Vec::new();
    for i in 0..10 {
        let scene = generate_scene(1024, i, 1024, arch.in_channels);
        let whole = predict_whole(arch, params, &scene.image).map_err(|e| e.to_string())?;
        let tiled = predict_tiled(arch, params, &scene.image, opts).map_err(|e| e.to_string())?;
        fractions.push(agreement(&whole, &tiled).map_err(|e| e.to_string())?);
    }
    let min = fractions.iter().copied().fold(1.0, f64::min);
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let detail = format!(
        "tile {} overlap {}: agreement mean {:.4}%, min {:.4}% over 10 rasters of 1024^2",
        opts.tile,
        opts.overlap,
        100.0 * mean,
        100.0 * min
    );
    ensure!(min >= 0.99, "{detail}");
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let samples: Vec<_> = (0..4).map(|i| generate_scene(9, i, 128, 4)).collect();
    let ablation = RunConfig::parse(ABLATION_CONF).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (arch, crop) in [(ArchConfig::default(), 64), (ablation.arch, ablation.train.crop)] {
        for v in Variant::ALL {
            let params = build_variant::<f32>(v, &arch, 3).map_err(|e| e.to_string())?;
            let (image, labels) = draw_batch(&samples, crop, 4, &mut rng(9)).map_err(|e| e.to_string())?;
            let (loss, _) = loss_and_grads(&arch, &params, image, &labels).map_err(|e| e.to_string())?;
            let err = (loss - 6f64.ln()).abs();
            ensure!(err < 1e-5, "{} step-0 loss {loss}", v.tag());
            worst = worst.max(err);
        }
    }
    Ok(format!("all variants, two widths: max |loss - ln 6| = {worst:.1e}"))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    say(&format!("criterion {n} {name:<28} {tag}  [{secs:.1} s] {detail}"));
    outcome.is_ok()
}

#[test]
fn acceptance() {
    // libtest has already printed `test acceptance ... ` without a newline.
    say("");
    let mut model = None;
    let results = [
        run(1, "gradient check", criterion_1),
        run(2, "degenerate cases", criterion_2),
        run(3, "kernel oracles", criterion_3),
        run(4, "structural invariants", criterion_4),
        run(5, "ablation trend", || criterion_5(&mut model)),
        run(6, "metrics", criterion_6),
        run(7, "determinism", criterion_7),
        run(8, "tiled vs whole prediction", || criterion_8(&model)),
        run(9, "initial loss", criterion_9),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}

//! `lanet`: synthesise data, train, evaluate, predict, check gradients and
//! run the variant ablation.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure (non-finite loss, gradient check above tolerance).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lanet_core::ablation::{run_ablation, Verdict};
use lanet_core::data::{dataset_digest, io::write_label_png, load_split, read_image, synth_generate, DEFAULT_BANDS};
use lanet_core::gradcheck::{check_aem, check_model, check_pam, GradCheckReport};
use lanet_core::infer::{predict_tiled, predict_whole};
use lanet_core::train::{evaluate, train};
use lanet_core::{
    Checkpoint, DatasetManifest, Error, MetricsReport, RunConfig, Split, TileOptions, Variant, CLASS_NAMES,
};

/// Gradient checks fail above this relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "lanet",
    version,
    about = "Patch attention segmentation of synthetic aerial scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one variant and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a colour-coded class map for one image.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences in f64.
    Gradcheck(GradcheckArgs),
    /// Train all four variants under several seeds and check the trend.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Scene side length in pixels; a multiple of 16.
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_BANDS)]
    bands: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Config sources shared by the training commands, lowest precedence first:
/// built-in defaults, `--config`, then `--set`.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// fcn, fcn-pam, fcn-aem or lanet; overrides `variant` in the config.
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint path; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print every n-th step of the training log.
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Tile size for tiled prediction; 0 predicts each image whole.
    #[arg(long, default_value_t = 0)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    overlap: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Band-group PNGs of one image, concatenated in the given order.
    #[arg(long, num_args = 1.., required = true)]
    image: Vec<PathBuf>,
    /// Output paletted PNG.
    #[arg(long)]
    out: PathBuf,
    /// Tile size; 0 predicts the whole image in one pass.
    #[arg(long, default_value_t = 512)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    overlap: usize,
    /// Run tiles on all cores. The output is identical.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Pam,
    Aem,
    Model,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: Module,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor for the model checks.
    #[arg(long, default_value_t = 8)]
    per_tensor: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory: trains on `train`, reports on `test`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of seeds, counted up from the config's `seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    println!("# resolved config");
    for line in cfg.render().lines() {
        println!("# {line}");
    }
}

fn load_manifest(data: Option<&Path>) -> Result<DatasetManifest, Failure> {
    let dir = data.ok_or_else(|| Failure::Usage("no dataset: pass --data or set `data`".into()))?;
    Ok(DatasetManifest::load(dir)?)
}

fn synth(a: SynthArgs) -> Outcome {
    let m = synth_generate(a.seed, a.count, a.size, a.bands, &a.out)?;
    println!(
        "{} scenes ({} train, {} val, {} test) at {}",
        m.ids().count(),
        m.train.len(),
        m.val.len(),
        m.test.len(),
        a.out.display()
    );
    println!("digest {}", dataset_digest(&a.out)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = resolve(&a.config)?;
    if let Some(v) = &a.variant {
        cfg.variant = v.parse()?;
    }
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("no output: pass --out or set `out`".into()))?;
    let manifest = load_manifest(cfg.data.as_deref())?;
    if manifest.bands != cfg.arch.in_channels {
        return Err(Failure::Data(format!(
            "dataset has {} bands, config expects in_channels = {}",
            manifest.bands, cfg.arch.in_channels
        )));
    }
    log_config(&cfg);
    let samples = load_split(&manifest, &Split::Train)?;
    let every = a.log_every.max(1);
    println!("step\tloss\tlr");
    let params = train(&samples, &cfg.arch, cfg.variant, &cfg.train, |l| {
        if l.step % every == 0 || l.step + 1 == cfg.train.steps {
            println!("{l}");
        }
    })?;
    let ckpt = Checkpoint { config: cfg, params };
    ckpt.save(&out)?;
    println!("checkpoint {} sha256 {}", out.display(), ckpt.digest());
    Ok(())
}

fn tiles(tile: usize, overlap: usize, parallel: bool) -> Option<TileOptions> {
    (tile > 0).then_some(TileOptions {
        tile,
        overlap,
        parallel,
    })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let samples = load_split(&manifest, &a.split.into())?;
    if samples.is_empty() {
        return Err(Failure::Data("split is empty".into()));
    }
    let cfg = &ckpt.config;
    let cm = evaluate(&cfg.arch, &ckpt.params, &samples, tiles(a.tile, a.overlap, false))?;
    let report = MetricsReport::from_matrix(&cm, &CLASS_NAMES, &cfg.f1_exclude)?;
    print!("{}", report.table());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.csv()).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let image = read_image(&a.image)?;
    let arch = &ckpt.config.arch;
    let map = match tiles(a.tile, a.overlap, a.parallel) {
        Some(t) => predict_tiled(arch, &ckpt.params, &image, t)?,
        None => predict_whole(arch, &ckpt.params, &image)?,
    };
    write_label_png(&a.out, &map)?;
    println!(
        "{}x{} class map written to {}",
        map.width(),
        map.height(),
        a.out.display()
    );
    Ok(())
}

type Check = Box<dyn Fn() -> lanet_core::Result<GradCheckReport>>;

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let mut targets: Vec<(String, Check)> = Vec::new();
    let seed = a.seed;
    if matches!(a.module, Module::Pam | Module::All) {
        targets.push(("pam".into(), Box::new(move || check_pam(seed))));
    }
    if matches!(a.module, Module::Aem | Module::All) {
        targets.push(("aem".into(), Box::new(move || check_aem(seed))));
    }
    if matches!(a.module, Module::Model | Module::All) {
        for v in Variant::ALL {
            let n = a.per_tensor;
            targets.push((format!("model/{}", v.tag()), Box::new(move || check_model(v, seed, n))));
        }
    }
    let mut worst = 0.0f64;
    for (name, run) in targets {
        let r = run()?;
        println!(
            "{name:<16} f64  max rel err {:.3e}  ({} coordinates, {} skipped at ReLU kinks)",
            r.max_rel_err, r.checked, r.skipped
        );
        worst = worst.max(r.max_rel_err);
    }
    if worst < GRADCHECK_TOL {
        println!("gradcheck PASS (tolerance {GRADCHECK_TOL:.0e})");
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradcheck FAIL: max rel err {worst:.3e} >= {GRADCHECK_TOL:.0e}"
        )))
    }
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let mut cfg = resolve(&a.config)?;
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    cfg.validate()?;
    let manifest = load_manifest(cfg.data.as_deref())?;
    log_config(&cfg);
    let train_set = load_split(&manifest, &Split::Train)?;
    let test = load_split(&manifest, &Split::Test)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
    let report = run_ablation(&cfg, &seeds, &train_set, &test, |r, _| {
        println!(
            "# {} seed {}: OA {:.2} mean F1 {:.2} final loss {:.4} ({:.0} s)",
            r.variant.label(),
            r.seed,
            r.overall_accuracy,
            r.mean_f1,
            r.final_loss,
            r.seconds
        );
    })?;
    print!("{}", report.render());
    if report.verdict() == Verdict::Fail {
        println!("per-seed numbers above; acceptance is on the seed mean");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

//! `cosod`: train, infer, eval, synth and bench from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! 3 data problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cosod::checkpoint::Checkpoint;
use cosod::dataio::{generate_synthetic, list_images, load_group_dataset, load_image, save_gray_png, stack_images, stem};
use cosod::metrics::{evaluate_dirs, MaxMode};
use cosod::network::{CoSodNet, Mode};
use cosod::trainer::{train_loop, LoopOptions};
use cosod::types::resize_bilinear;
use cosod::{Error, GroupBatch, Image, RunConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cosod", version, about = "Co-salient object detection: training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a grouped dataset.
    Train(TrainArgs),
    /// Predict saliency maps for every group of images in a directory.
    Infer(InferArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic shape-group dataset.
    Synth(SynthArgs),
    /// Time forward passes and report the parameter count.
    Bench(BenchArgs),
    /// Print a configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Args)]
struct ConfigSource {
    /// JSON config file; the desk-scale toy configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
                RunConfig::from_json_str(&text)?
            }
            None => RunConfig::toy(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigSource,
    /// Dataset root holding `images/` and `gt/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from a `last.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// One directory per group (a dataset root with `images/` also works).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Min-max stretch each map to the full range before writing.
    #[arg(long)]
    stretch: bool,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted maps, `<group>/<stem>.png`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth maps, or a dataset root holding `gt/`.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a per-group CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Maximize F and E per image before averaging.
    #[arg(long)]
    per_image_max: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long, default_value_t = 12)]
    per_group: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; otherwise a fresh model from the config.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigSource,
    /// Images per group.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Classes of a fresh model.
    #[arg(long, default_value_t = 8)]
    classes: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    cfg: ConfigSource,
    /// Start from the full-scale defaults rather than the toy settings.
    #[arg(long)]
    full: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Data(_) | Error::Ingest { .. } | Error::Image { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => match a.precision {
            Precision::F32 => run_train::<f32>(&a),
            Precision::F64 => run_train::<f64>(&a),
        },
        Command::Infer(a) => match a.precision {
            Precision::F32 => run_infer::<f32>(&a),
            Precision::F64 => run_infer::<f64>(&a),
        },
        Command::Eval(a) => run_eval(&a),
        Command::Synth(a) => run_synth(&a),
        Command::Bench(a) => run_bench(&a),
        Command::Config(a) => run_config(&a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn mkdir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run_train<T: Scalar>(a: &TrainArgs) -> Result<u8, Error> {
    let cfg = a.cfg.resolve()?;
    let ds = load_group_dataset(&a.data)?;
    mkdir(&a.out)?;
    write(&a.out.join("config.json"), &cfg.to_json_pretty())?;
    let opts = LoopOptions { out_dir: Some(a.out.clone()), resume: a.resume.clone(), verbose: !a.quiet };
    let res = train_loop::<T>(&cfg, &ds, &opts)?;
    let summary = json!({
        "steps": res.trainer.state.step,
        "epochs": res.trainer.state.epoch,
        "last": res.last,
        "best": res.best,
        "best_s_alpha": (res.trainer.state.best_metric >= 0.0).then_some(res.trainer.state.best_metric),
        "final_eval": res.evals.last(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

/// Group directories under `root`; a root with images but no subdirectories
/// is a single group named after itself.
fn group_dirs(root: &Path) -> Result<Vec<PathBuf>, Error> {
    let root = if root.join("images").is_dir() { root.join("images") } else { root.to_path_buf() };
    let rd = fs::read_dir(&root).map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    if dirs.is_empty() && !list_images(&root)?.is_empty() {
        dirs.push(root);
    }
    Ok(dirs)
}

fn stretch(img: &mut Image<f32>) {
    let (lo, hi) = img.data.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        for v in img.data.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
}

fn run_infer<T: Scalar>(a: &InferArgs) -> Result<u8, Error> {
    let ck = Checkpoint::<T>::load(&a.ckpt)?;
    let net = CoSodNet::from_checkpoint(&ck)?;
    let side = net.side();
    let (mut written, mut failed) = (0usize, 0usize);
    for dir in group_dirs(&a.input)? {
        let group = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut images = Vec::new();
        let mut stems = Vec::new();
        for f in list_images(&dir)? {
            match load_image(&f) {
                Ok(img) => {
                    images.push(img);
                    stems.push(stem(&f));
                }
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", f.display());
                    failed += 1;
                }
            }
        }
        if images.is_empty() {
            continue;
        }
        let maps = net.predict_group(&stack_images::<T>(&images, side)?)?;
        let gdir = a.out.join(&group);
        mkdir(&gdir)?;
        for (i, (img, s)) in images.iter().zip(&stems).enumerate() {
            let mut m = resize_bilinear(&maps.image(i).cast::<f32>(), img.height, img.width)?;
            if a.stretch {
                stretch(&mut m);
            }
            save_gray_png(&gdir.join(format!("{s}.png")), &m)?;
            written += 1;
        }
    }
    eprintln!("wrote {written} maps to {}", a.out.display());
    if written == 0 {
        return Err(Error::Data(format!("no readable images under {} ({failed} failed)", a.input.display())));
    }
    Ok(0)
}

fn run_eval(a: &EvalArgs) -> Result<u8, Error> {
    let mode = if a.per_image_max { MaxMode::PerImage } else { MaxMode::Dataset };
    let rep = evaluate_dirs(&a.pred, &a.gt, mode)?;
    let text = serde_json::to_string_pretty(&rep)?;
    println!("{text}");
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    if let Some(p) = &a.csv {
        write(p, &rep.to_csv())?;
    }
    if !rep.unmatched.is_empty() {
        eprintln!("error: {} unmatched files: {}", rep.unmatched.len(), rep.unmatched.join(", "));
        return Ok(3);
    }
    Ok(0)
}

fn run_synth(a: &SynthArgs) -> Result<u8, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let ds = generate_synthetic(&a.out, a.groups, a.per_group, a.size, &mut rng)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "root": a.out, "groups": ds.class_names, "images": ds.n_images() }))?
    );
    Ok(0)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn run_bench(a: &BenchArgs) -> Result<u8, Error> {
    let net = match &a.ckpt {
        Some(p) => CoSodNet::from_checkpoint(&Checkpoint::<f32>::load(p)?)?,
        None => CoSodNet::<f32>::new(&a.cfg.resolve()?, a.classes)?,
    };
    if a.batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let side = net.side();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::from_fn(&[a.batch, 3, side, side], |_| rng.random_range(0.0f32..1.0));
    let batch = GroupBatch::duplicated(images, 0)?;
    for _ in 0..a.warmup {
        net.forward(&batch, Mode::Infer)?;
    }
    let mut ms = Vec::with_capacity(a.reps);
    for _ in 0..a.reps {
        let t = Instant::now();
        net.forward(&batch, Mode::Infer)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64);
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let med = (!sorted.is_empty()).then(|| median(&sorted));
    let report = json!({
        "backbone": net.config.backbone,
        "image_size": side,
        "batch": a.batch,
        "reps": a.reps,
        "param_count": net.param_count(),
        "analytic_param_count": CoSodNet::<f32>::analytic_param_count(net.config.backbone, net.n_classes),
        "median_ms": med,
        "mean_ms": mean,
        "timings_ms": ms,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn run_config(a: &ConfigArgs) -> Result<u8, Error> {
    let cfg = if a.full && a.cfg.config.is_none() {
        RunConfig::default().with_overrides(&a.cfg.overrides)?
    } else {
        a.cfg.resolve()?
    };
    println!("{}", cfg.to_json_pretty());
    Ok(0)
}

//! Saliency-audit pipeline: theory verification, training, explanation,
//! auditing, and composite-dataset construction.
//!
//! Exit codes: 0 success, 1 numeric/verification failure, 2 shape/config
//! error, 3 I/O or format error.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use camaudit_core::cam::{self, CamMethod, OptiCamOptions};
use camaudit_core::data::{self, LabeledDataset, Manifest, ManifestItem};
use camaudit_core::model::{self, build_mini_masked_vgg, MiniVggConfig};
use camaudit_core::report::{self, canonical_json, AuditOptions};
use camaudit_core::theory::{self, McGradcamConfig};
use camaudit_core::train::{self, TrainConfig};
use camaudit_core::{nn, parallel, Error, Result, Tensor};

use config::{resolve, ConfigFile};

#[derive(Parser)]
#[command(name = "camaudit", version, about = "Audit CAM saliency methods against provably unseen input regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo verification of the expected GradCAM bound and the
    /// moment formulas behind it.
    VerifyTheory(VerifyTheoryArgs),
    /// Train the masked mini CNN on stacked same-class digit composites.
    Train(TrainArgs),
    /// Explain one image with one method and render the overlay.
    Explain(ExplainArgs),
    /// Score dead-zone leakage for every method over a dataset.
    Audit(AuditArgs),
    /// Build a stacked composite dataset and its manifest.
    Compose(ComposeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Base seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
}

const COMMON_KEYS: [&str; 3] = ["seed", "out", "threads"];

impl CommonArgs {
    fn load_config(&self, keys: &[&str]) -> Result<ConfigFile> {
        let mut known: Vec<&str> = COMMON_KEYS.to_vec();
        known.extend_from_slice(keys);
        match &self.config {
            Some(path) => ConfigFile::load(path, &known),
            None => Ok(ConfigFile::default()),
        }
    }

    fn resolve(&self, file: &ConfigFile, default_out: &str) -> Result<(u64, PathBuf, usize)> {
        let seed = resolve(&self.seed, file, "seed", 0)?;
        let out = resolve(&self.out, file, "out", PathBuf::from(default_out))?;
        let threads = resolve(&self.threads, file, "threads", parallel::default_threads())?;
        if threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok((seed, out, threads))
    }
}

#[derive(Args)]
struct VerifyTheoryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Filter count V.
    #[arg(long)]
    filters: Option<usize>,
    /// Convolution kernel size.
    #[arg(long)]
    kernel: Option<usize>,
    /// Max-pool window.
    #[arg(long)]
    pool: Option<usize>,
    /// Initialization standard deviation.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of Monte-Carlo seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Digit to render when no image is given.
    #[arg(long)]
    digit: Option<usize>,
    /// PGM image to verify on (defaults to a rendered digit).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Sample count for the moment checks.
    #[arg(long)]
    moment_samples: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Digit images per class for the base corpus.
    #[arg(long)]
    per_class: Option<usize>,
    /// Stacked composites per class.
    #[arg(long)]
    stack_per_class: Option<usize>,
    /// IDX image file (synthetic digits when omitted).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Masked band rows of the 14-row feature grid.
    #[arg(long)]
    band_rows: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Epochs between learning-rate drops (0 disables).
    #[arg(long)]
    step_every: Option<usize>,
    #[arg(long)]
    step_factor: Option<f64>,
    /// Stop once the train accuracy reaches this value.
    #[arg(long)]
    target_acc: Option<f64>,
    /// Random horizontal flips.
    #[arg(long)]
    hflip: Option<bool>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM image to explain (a stacked composite is built when omitted).
    #[arg(long)]
    image: Option<PathBuf>,
    /// gradcam, xgradcam, gradcampp, hirescam, scorecam, opticam,
    /// ablationcam, or eigencam.
    #[arg(long)]
    method: Option<String>,
    /// Class to explain (defaults to the predicted class).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    opti_steps: Option<usize>,
    #[arg(long)]
    opti_lr: Option<f64>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Composite manifest to audit (a synthetic set is built when omitted).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Digit images per class when synthesizing.
    #[arg(long)]
    per_class: Option<usize>,
    /// Stacked composites per class when synthesizing.
    #[arg(long)]
    stack_per_class: Option<usize>,
    /// Comma-separated method list (default: all).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    opti_steps: Option<usize>,
    #[arg(long)]
    opti_lr: Option<f64>,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Digit images per class for the base corpus.
    #[arg(long)]
    per_class: Option<usize>,
    /// Composites per class.
    #[arg(long)]
    composites_per_class: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Canvas rows and cols.
    #[arg(long)]
    canvas: Option<usize>,
    /// Row where the bottom digit starts.
    #[arg(long)]
    bottom_row: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::VerifyTheory(args) => cmd_verify_theory(args),
        Command::Train(args) => cmd_train(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Compose(args) => cmd_compose(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

fn base_digits(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    match (images, labels) {
        (Some(images), Some(labels)) => data::load_idx_dataset(images, labels),
        (None, None) => Ok(data::synthetic_digits(per_class, seed)),
        _ => Err(Error::Config("--images and --labels must be given together".into())),
    }
}

fn cmd_verify_theory(args: VerifyTheoryArgs) -> Result<i32> {
    let file = args.common.load_config(&[
        "filters", "kernel", "pool", "tau", "seeds", "digit", "image", "moment_samples",
    ])?;
    let (seed, out, threads) = args.common.resolve(&file, "theory-out")?;
    let cfg = McGradcamConfig {
        filters: resolve(&args.filters, &file, "filters", 64)?,
        kernel: resolve(&args.kernel, &file, "kernel", 5)?,
        pool: resolve(&args.pool, &file, "pool", 2)?,
        tau: resolve(&args.tau, &file, "tau", 1.0)?,
        n_seeds: resolve(&args.seeds, &file, "seeds", 2000)?,
        base_seed: seed,
        threads,
    };
    let moment_samples = resolve(&args.moment_samples, &file, "moment_samples", 1_000_000)?;
    let image_path = match &args.image {
        Some(p) => Some(p.clone()),
        None => file.get::<PathBuf>("image")?,
    };
    let image = match image_path {
        Some(path) => data::read_pgm(&path)?,
        None => {
            let digit = resolve(&args.digit, &file, "digit", 3)?;
            if digit > 9 {
                return Err(Error::Config(format!("digit must be 0..9, got {digit}")));
            }
            let mut rng = camaudit_core::rng::Rng::from_seed_stream(seed, 77);
            data::render_digit(digit, &mut rng)
        }
    };

    std::fs::create_dir_all(&out)?;
    data::write_pgm(&out.join("input.pgm"), &image)?;

    // Moment formula checks behind the bound.
    let mut checks = vec![theory::rectified_mean_mc_check(0.5, 2.0, moment_samples, seed ^ 0xA1)?];
    checks.extend(theory::squared_rectified_mc_check(1.0, moment_samples, seed ^ 0xA2)?);
    let mut patch = Tensor::zeros(&[cfg.kernel, cfg.kernel]);
    let mut rng = camaudit_core::rng::Rng::from_seed_stream(seed, 78);
    for v in patch.data_mut() {
        *v = rng.next_f64();
    }
    checks.extend(theory::conv_gaussian_law_check(&patch, cfg.tau, 100_000, seed ^ 0xA3)?);

    let report = theory::mc_expected_gradcam(&image, &cfg)?;

    // Mean-map overlay at input resolution (the verification's visual form).
    let (h, w) = (report.feature_rows, report.feature_cols);
    let mut mean_map = Tensor::zeros(&[h, w]);
    for p in &report.pixels {
        mean_map.set2(p.row, p.col, p.estimate);
    }
    let sal =
        cam::upsample_normalize(CamMethod::GradCam, mean_map, image.shape()[1], image.shape()[2])?;
    report::render_overlay(&image, &sal.normalized, &report.dead_zone, &out.join("mean_gradcam.ppm"))?;

    #[derive(serde::Serialize)]
    struct FullReport<'a> {
        moment_checks: &'a [theory::McCheck],
        bound_check: &'a theory::BoundReport,
    }
    let json = canonical_json(&FullReport { moment_checks: &checks, bound_check: &report })?;
    std::fs::write(out.join("report.json"), &json)?;

    let moments_ok = checks.iter().all(|c| c.within_3se);
    let judged = report.pixels.iter().filter(|p| p.judged).count();
    println!(
        "expected-score bound: {}/{judged} judged pixels pass; dead-zone activity in {:.1}% of seeds",
        report.pixels.iter().filter(|p| p.judged && p.pass).count(),
        report.dead_zone_positive_fraction * 100.0
    );
    for check in &checks {
        println!(
            "{}: formula {:.6} vs estimate {:.6} ({})",
            check.label,
            check.expected,
            check.estimate,
            if check.within_3se { "ok" } else { "FAIL" }
        );
    }
    Ok(if report.all_pass && moments_ok { 0 } else { 1 })
}

fn stacked_dataset(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    per_class: usize,
    stack_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let base = base_digits(images, labels, per_class, seed ^ 0xD1)?;
    data::stack_digits(&base, (56, 56), 28, stack_per_class, seed ^ 0xD2)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let file = args.common.load_config(&[
        "per_class", "stack_per_class", "images", "labels", "band_rows", "epochs", "batch_size",
        "lr", "momentum", "weight_decay", "step_every", "step_factor", "target_acc", "hflip",
    ])?;
    let (seed, out, threads) = args.common.resolve(&file, "train-out")?;
    let per_class = resolve(&args.per_class, &file, "per_class", 40)?;
    let stack_per_class = resolve(&args.stack_per_class, &file, "stack_per_class", 40)?;
    let band_rows = resolve(&args.band_rows, &file, "band_rows", 6)?;
    let ds = stacked_dataset(&args.images, &args.labels, per_class, stack_per_class, seed)?;

    let mut model = build_mini_masked_vgg(&MiniVggConfig {
        band_rows,
        seed: seed ^ 0xD3,
        ..Default::default()
    })?;
    let target_acc = match args.target_acc {
        Some(t) => Some(t),
        None => file.get::<f64>("target_acc")?,
    };
    let cfg = TrainConfig {
        epochs: resolve(&args.epochs, &file, "epochs", 20)?,
        batch_size: resolve(&args.batch_size, &file, "batch_size", 64)?,
        lr: resolve(&args.lr, &file, "lr", 0.05)?,
        momentum: resolve(&args.momentum, &file, "momentum", 0.9)?,
        weight_decay: resolve(&args.weight_decay, &file, "weight_decay", 5e-4)?,
        lr_step_every: resolve(&args.step_every, &file, "step_every", 10)?,
        lr_step_factor: resolve(&args.step_factor, &file, "step_factor", 0.1)?,
        seed: seed ^ 0xD4,
        augment_hflip: resolve(&args.hflip, &file, "hflip", false)?,
        stop_at_train_acc: target_acc,
        threads,
    };
    std::fs::create_dir_all(&out)?;
    let log = train::train(&mut model, &ds, None, &cfg)?;
    model::save_checkpoint(&model, &out.join("model.ckpt"))?;
    std::fs::write(out.join("train_log.csv"), log.to_csv())?;
    let final_acc = train::evaluate_threaded(&model, &ds, threads)?;
    println!(
        "trained {} epochs on {} composites; train accuracy {:.4}",
        log.epoch_loss.len(),
        ds.len(),
        final_acc
    );
    Ok(0)
}

fn parse_method(name: &str) -> Result<CamMethod> {
    CamMethod::from_name(name).ok_or_else(|| Error::Config(format!("unknown method {name:?}")))
}

fn cmd_explain(args: ExplainArgs) -> Result<i32> {
    let file = args.common.load_config(&["image", "method", "class", "opti_steps", "opti_lr"])?;
    let (seed, out, _threads) = args.common.resolve(&file, "explain-out")?;
    let model = model::load_checkpoint(&args.checkpoint)?;
    let image_path = match &args.image {
        Some(p) => Some(p.clone()),
        None => file.get::<PathBuf>("image")?,
    };
    let image = match image_path {
        Some(path) => data::read_pgm(&path)?,
        None => {
            let ds = stacked_dataset(&None, &None, 4, 1, seed)?;
            ds.images[0].clone()
        }
    };
    let method = parse_method(&resolve(&args.method, &file, "method", "gradcam".to_string())?)?;
    let opti = OptiCamOptions {
        steps: resolve(&args.opti_steps, &file, "opti_steps", 50)?,
        lr: resolve(&args.opti_lr, &file, "opti_lr", 0.05)?,
    };
    let trace = nn::forward(&model, &image)?;
    let class = match args.class {
        Some(c) => c,
        None => file.get::<usize>("class")?.unwrap_or_else(|| trace.predicted_class()),
    };
    if class >= model.spec.class_count() {
        return Err(Error::Config(format!("class {class} out of range")));
    }
    let map = cam::compute(method, &model, &trace, class, opti)?;
    std::fs::create_dir_all(&out)?;
    let dead_zone = model::compute_dead_zone(&model.spec)?;
    report::render_overlay(&image, &map.normalized, &dead_zone, &out.join(format!("{method}.ppm")))?;
    data::write_pgm(&out.join(format!("{method}_map.pgm")), &map.normalized)?;
    let leak = report::mu(&map.upsampled, &dead_zone);
    println!("{method}: class {class}, mu = {leak:.6}");
    Ok(0)
}

fn cmd_audit(args: AuditArgs) -> Result<i32> {
    let file = args.common.load_config(&[
        "manifest", "per_class", "stack_per_class", "methods", "opti_steps", "opti_lr",
    ])?;
    let (seed, out, threads) = args.common.resolve(&file, "audit-out")?;
    let model = model::load_checkpoint(&args.checkpoint)?;
    let manifest_path = match &args.manifest {
        Some(p) => Some(p.clone()),
        None => file.get::<PathBuf>("manifest")?,
    };
    let ds = match manifest_path {
        Some(path) => {
            let manifest = Manifest::load(&path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            manifest.load_dataset(base)?
        }
        None => stacked_dataset(
            &None,
            &None,
            resolve(&args.per_class, &file, "per_class", 20)?,
            resolve(&args.stack_per_class, &file, "stack_per_class", 10)?,
            seed,
        )?,
    };
    let methods = match &args.methods {
        Some(list) => list.split(',').map(|m| parse_method(m.trim())).collect::<Result<Vec<_>>>()?,
        None => match file.get::<String>("methods")? {
            Some(list) => {
                list.split(',').map(|m| parse_method(m.trim())).collect::<Result<Vec<_>>>()?
            }
            None => CamMethod::ALL.to_vec(),
        },
    };
    let opts = AuditOptions {
        methods,
        opti: OptiCamOptions {
            steps: resolve(&args.opti_steps, &file, "opti_steps", 50)?,
            lr: resolve(&args.opti_lr, &file, "opti_lr", 0.05)?,
        },
        threads,
    };
    let report = report::run_audit(&model, &ds, &opts)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("audit.json"), report.to_json()?)?;
    std::fs::write(out.join("audit.csv"), report.to_csv())?;
    for summary in &report.summaries {
        println!(
            "{:<12} mu x100 = {:>7.2} +- {:>6.2}  positive on {:>5.1}% of {} images",
            summary.method.to_string(),
            summary.mean_mu_x100,
            summary.std_mu_x100,
            summary.positive_fraction * 100.0,
            summary.images
        );
    }
    Ok(0)
}

fn cmd_compose(args: ComposeArgs) -> Result<i32> {
    let file = args.common.load_config(&[
        "per_class", "composites_per_class", "images", "labels", "canvas", "bottom_row",
    ])?;
    let (seed, out, _threads) = args.common.resolve(&file, "compose-out")?;
    let per_class = resolve(&args.per_class, &file, "per_class", 10)?;
    let composites = resolve(&args.composites_per_class, &file, "composites_per_class", 10)?;
    let canvas = resolve(&args.canvas, &file, "canvas", 56)?;
    let bottom_row = resolve(&args.bottom_row, &file, "bottom_row", 28)?;
    let base = base_digits(&args.images, &args.labels, per_class, seed ^ 0xC1)?;
    let stacked = data::stack_digits(&base, (canvas, canvas), bottom_row, composites, seed ^ 0xC2)?;

    std::fs::create_dir_all(&out)?;
    let mut items = Vec::with_capacity(stacked.len());
    for (i, (image, &label)) in stacked.images.iter().zip(&stacked.labels).enumerate() {
        let name = format!("composite_{i:04}.pgm");
        data::write_pgm(&out.join(&name), image)?;
        items.push(ManifestItem {
            path: PathBuf::from(&name),
            label,
            class_name: stacked.class_names[label].clone(),
        });
    }
    let manifest = Manifest { canvas: (canvas, canvas), split_row: bottom_row, items };
    manifest.save(&out.join("manifest.json"))?;
    println!("wrote {} composites to {}", stacked.len(), out.display());
    Ok(0)
}

//! Command-line entry point.
//!
//! One binary, seven subcommands covering the whole pipeline: generate a
//! dataset, train a classifier, attack it, compare its internal
//! representations, calibrate the rejection defense, sweep a security
//! curve, and train the adversarial baseline.
//!
//! Conventions shared by every subcommand:
//!
//! * All randomness flows from `--seed`, which defaults to 0 and is never
//!   taken from the clock. The same command line twice produces the same
//!   bytes in every artifact.
//! * Each run records its fully resolved configuration in the artifact it
//!   writes: datasets and checkpoints embed metadata files, attack results
//!   embed a config block, and CSV outputs get a `<out>.meta.json` sidecar.
//! * Usage errors (unknown flag, missing required argument) exit with 2;
//!   runtime failures print one diagnostic line to stderr and exit with 1.
//! * `FUSEGUARD_LOG` (error|warn|info|debug) controls stderr logging;
//!   artifacts never depend on the log level.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attack::{
    adaptive_patch_attack, adaptive_pgd_attack, patch_attack, pgd_attack, AttackBudget,
    AttackMode, AttackResult, EpsScale, PatchSpec, Placement, TargetParts,
};
use crate::cka::{heatmap, heatmap_csv, redundancy_score, Kernel, Stream, DEFAULT_SIGMA_FRACTION};
use crate::dataset::{
    generate, load_dataset, save_dataset, ChannelStats, Dataset, DatasetSpec, TexturePolicy,
};
use crate::detector::{
    calibrate, defended_predict, load_detector, save_detector, CalibrationConfig, DetectorState,
    RejectMode,
};
use crate::error::{Error, Result};
use crate::harness::{
    adversarial_train, evaluate_curve, sample_seed, write_curve, AdvTrainConfig, CurveFormat,
    CurvePlacement, CurveSpec,
};
use crate::model::{load_net, save_net, train, Arch, FusionNet, Optimizer, TrainConfig, Variant};
use crate::tensor::Tensor;

/// Attack, analyze, and defend a two-stream RGB-D fusion classifier.
#[derive(Parser, Debug)]
#[command(name = "fuseguard", version, about)]
pub struct Cli {
    /// Root seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic RGB-D dataset to a directory.
    Generate(GenerateArgs),
    /// Train a fusion classifier on a generated dataset.
    Train(TrainArgs),
    /// Attack samples one by one and record per-sample results.
    Attack(AttackArgs),
    /// Compare stage representations of one stream via CKA.
    Cka(CkaArgs),
    /// Fit class centroids and the rejection threshold.
    Calibrate(CalibrateArgs),
    /// Sweep a security curve over attack budgets.
    Evaluate(EvaluateArgs),
    /// Train with adversarially augmented batches.
    AdvTrain(AdvTrainArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of object classes.
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 40)]
    pub train_per_class: usize,
    /// Test samples per class.
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    /// Side of the square images in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Texture policy: shared (two classes share a palette) or distinct.
    #[arg(long, default_value = "shared", value_parser = parse_texture)]
    pub texture: TexturePolicy,
    /// Standard deviation of additive depth noise, in depth units.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Which streams the network consumes: rgbd, rgb, or depth.
    #[arg(long, default_value = "rgbd", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    /// Optimizer: rmsprop or sgd.
    #[arg(long, default_value = "rmsprop", value_parser = parse_optimizer)]
    pub optimizer: Optimizer,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output results file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Attack mode: pgd, patch, adaptive-pgd, or adaptive-patch.
    #[arg(long, value_parser = parse_from::<AttackMode>)]
    pub mode: AttackMode,
    /// Perturbation bound; for patch modes this bounds the patch content.
    #[arg(long)]
    pub eps: f32,
    /// Gradient steps per sample.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Step size; defaults to a quarter of the epsilon.
    #[arg(long)]
    pub step_size: Option<f32>,
    /// Which streams the attack may touch: rgb, depth, or both. Defaults to
    /// both for full-image modes and rgb for patch modes.
    #[arg(long, value_parser = parse_from::<TargetParts>)]
    pub parts: Option<TargetParts>,
    /// Unit of the epsilon: unit for [0,1] pixels, pixel255 for 8-bit steps.
    #[arg(long, default_value = "unit", value_parser = parse_from::<EpsScale>)]
    pub eps_scale: EpsScale,
    /// Patch side in pixels; required by patch modes.
    #[arg(long)]
    pub patch_side: Option<usize>,
    /// Patch placement: fixed-center or random-translation.
    #[arg(long, default_value = "fixed-center", value_parser = parse_from::<CurvePlacement>)]
    pub placement: CurvePlacement,
    /// Detector state for adaptive modes, or to report rejection verdicts
    /// alongside a standard attack.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Which split to attack.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitChoice,
    /// Attack only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output heatmap file (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Which stream's stages to compare: rgb or depth.
    #[arg(long, value_parser = parse_from::<Stream>)]
    pub stream: Stream,
    /// Kernel: linear or rbf.
    #[arg(long, default_value = "linear", value_parser = parse_from::<Kernel>)]
    pub kernel: Kernel,
    /// RBF bandwidth as a fraction of the median pairwise distance.
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRACTION)]
    pub sigma_fraction: f64,
    /// Which split to read activations from.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitChoice,
    /// Use only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output detector state file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Target false-positive rate on clean calibration data.
    #[arg(long, default_value_t = 0.1)]
    pub fpr: f64,
    /// Sigmoid sharpness of the soft rejection score.
    #[arg(long, default_value_t = 30.0)]
    pub lambda: f32,
    /// Calibration data: train uses the whole train split for both
    /// centroids and threshold scores; heldout alternates each class's
    /// samples between the two roles.
    #[arg(long, default_value = "train", value_parser = parse_cal_split)]
    pub split: CalSplit,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output curve file.
    #[arg(long)]
    pub out: PathBuf,
    /// Attack mode: pgd, patch, adaptive-pgd, or adaptive-patch.
    #[arg(long, value_parser = parse_from::<AttackMode>)]
    pub mode: AttackMode,
    /// Comma-separated budget levels, starting at 0 and strictly
    /// increasing. Epsilons for full-image modes, patch sides for patch
    /// modes.
    #[arg(long, value_parser = parse_levels)]
    pub levels: Levels,
    /// Gradient steps per attacked sample.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Step size as a fraction of the active epsilon.
    #[arg(long, default_value_t = 0.25)]
    pub step_fraction: f32,
    /// Patch content bound on the patch axis.
    #[arg(long, default_value_t = 1.0)]
    pub patch_eps: f32,
    /// Which streams the attack may touch. Defaults to both for full-image
    /// modes and rgb for patch modes.
    #[arg(long, value_parser = parse_from::<TargetParts>)]
    pub parts: Option<TargetParts>,
    /// Unit of the epsilon levels.
    #[arg(long, default_value = "unit", value_parser = parse_from::<EpsScale>)]
    pub eps_scale: EpsScale,
    /// Patch placement policy.
    #[arg(long, default_value = "fixed-center", value_parser = parse_from::<CurvePlacement>)]
    pub placement: CurvePlacement,
    /// Detector state for the defended columns; required by adaptive modes.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Which split to evaluate.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitChoice,
    /// Evaluate only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output format: csv or json.
    #[arg(long, default_value = "csv", value_parser = parse_from::<CurveFormat>)]
    pub format: CurveFormat,
}

#[derive(Args, Debug)]
pub struct AdvTrainArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Which streams the network consumes.
    #[arg(long, default_value = "rgbd", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    /// Optimizer: rmsprop or sgd.
    #[arg(long, default_value = "rmsprop", value_parser = parse_optimizer)]
    pub optimizer: Optimizer,
    /// Comma-separated augmentation epsilons, strictly increasing; one is
    /// drawn per batch.
    #[arg(long, default_value = "0.1", value_parser = parse_levels)]
    pub eps_list: Levels,
    /// PGD steps per crafted example.
    #[arg(long, default_value_t = 10)]
    pub attack_steps: usize,
    /// PGD step size as a fraction of the drawn epsilon.
    #[arg(long, default_value_t = 0.25)]
    pub step_fraction: f32,
    /// Weight of the adversarial loss term in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub mix: f32,
    /// Craft one fixed augmentation set from the initial weights instead of
    /// regenerating from the current weights every epoch.
    #[arg(long)]
    pub fixed_set: bool,
    /// Which streams the crafted perturbations may touch.
    #[arg(long, default_value = "both", value_parser = parse_from::<TargetParts>)]
    pub parts: TargetParts,
    /// Unit of the augmentation epsilons.
    #[arg(long, default_value = "unit", value_parser = parse_from::<EpsScale>)]
    pub eps_scale: EpsScale,
}

/// A comma-separated, strictly increasing list of budget values.
#[derive(Clone, Debug)]
pub struct Levels(pub Vec<f32>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
}

impl Display for SplitChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitChoice::Train => write!(f, "train"),
            SplitChoice::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalSplit {
    Train,
    Heldout,
}

impl Display for CalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CalSplit::Train => write!(f, "train"),
            CalSplit::Heldout => write!(f, "heldout"),
        }
    }
}

fn parse_from<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse()
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    match s {
        "rmsprop" => Ok(Optimizer::RmsProp),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(format!("unknown optimizer {other:?}; expected rmsprop or sgd")),
    }
}

fn parse_texture(s: &str) -> std::result::Result<TexturePolicy, String> {
    match s {
        "shared" => Ok(TexturePolicy::Shared),
        "distinct" => Ok(TexturePolicy::Distinct),
        other => Err(format!("unknown texture policy {other:?}; expected shared or distinct")),
    }
}

fn parse_split(s: &str) -> std::result::Result<SplitChoice, String> {
    match s {
        "train" => Ok(SplitChoice::Train),
        "test" => Ok(SplitChoice::Test),
        other => Err(format!("unknown split {other:?}; expected train or test")),
    }
}

fn parse_cal_split(s: &str) -> std::result::Result<CalSplit, String> {
    match s {
        "train" => Ok(CalSplit::Train),
        "heldout" => Ok(CalSplit::Heldout),
        other => Err(format!("unknown calibration split {other:?}; expected train or heldout")),
    }
}

fn parse_levels(s: &str) -> std::result::Result<Levels, String> {
    let mut values = Vec::new();
    for part in s.split(',') {
        let v: f32 = part
            .trim()
            .parse()
            .map_err(|_| format!("bad number {part:?} in list {s:?}"))?;
        if !v.is_finite() {
            return Err(format!("non-finite value {part:?} in list {s:?}"));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err("the list is empty".into());
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(format!("values must be strictly increasing, got {s:?}"));
    }
    Ok(Levels(values))
}

/// Entry point used by the binary. Parses arguments (usage errors exit 2),
/// runs the subcommand, and maps runtime failures to exit 1.
pub fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("FUSEGUARD_LOG", "warn"),
    )
    .format_timestamp(None)
    .try_init();

    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => run_generate(cli.seed, args),
        Command::Train(args) => run_train(cli.seed, args),
        Command::Attack(args) => run_attack(cli.seed, args),
        Command::Cka(args) => run_cka(cli.seed, args),
        Command::Calibrate(args) => run_calibrate(cli.seed, args),
        Command::Evaluate(args) => run_evaluate(cli.seed, args),
        Command::AdvTrain(args) => run_adv_train(cli.seed, args),
    }
}

fn run_generate(seed: u64, args: &GenerateArgs) -> Result<()> {
    let spec = DatasetSpec {
        num_classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        image_size: args.image_size,
        texture_policy: args.texture,
        depth_noise_std: args.depth_noise,
        seed,
    };
    let (train_split, test_split) = generate(&spec)?;
    let stats = ChannelStats::fit(&train_split)?;
    save_dataset(&args.out, &spec, &train_split, &test_split, &stats)?;
    log::info!(
        "wrote {} train and {} test samples to {}",
        train_split.len(),
        test_split.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(seed: u64, args: &TrainArgs) -> Result<()> {
    let (train_split, test_split, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let arch = Arch {
        image_size: meta.spec.image_size,
        ..Arch::toy(meta.spec.num_classes)
    };
    let mut net = FusionNet::new(args.variant, arch, seed)?;
    let cfg = TrainConfig {
        optimizer: args.optimizer,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed,
        ..TrainConfig::toy(seed)
    };
    let report = train(&mut net, &train_split, &stats, &cfg)?;
    save_net(&args.out, &net)?;

    let test_accuracy = split_accuracy(&net, &test_split, &stats)?;
    let meta_path = args.out.join("train_meta.json");
    write_json(
        &meta_path,
        &serde_json::json!({
            "command": "train",
            "data": args.data.display().to_string(),
            "variant": net.variant.to_string(),
            "config": serde_json::to_value(&cfg).map_err(encode_err)?,
            "seed": seed,
            "report": {
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "final_train_accuracy": report.final_train_accuracy,
                "epoch_losses": report.epoch_losses,
            },
            "test_accuracy": test_accuracy,
        }),
    )?;
    log::info!(
        "trained {} for {} epochs: train accuracy {:.3}, test accuracy {:.3}",
        net.variant,
        cfg.epochs,
        report.final_train_accuracy,
        test_accuracy
    );
    Ok(())
}

fn run_attack(seed: u64, args: &AttackArgs) -> Result<()> {
    let (train_split, test_split, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let net = load_net(&args.ckpt)?;
    let detector = args.detector.as_deref().map(load_detector).transpose()?;
    if args.mode.is_adaptive() && detector.is_none() {
        return Err(Error::Attack(format!(
            "attack mode {} optimizes against the detector; pass --detector",
            args.mode
        )));
    }
    if args.mode.is_patch() && args.patch_side.is_none() {
        return Err(Error::Attack(format!(
            "attack mode {} needs --patch-side",
            args.mode
        )));
    }
    if !args.mode.is_patch() && args.patch_side.is_some() {
        return Err(Error::Attack("--patch-side applies to patch modes only".into()));
    }

    let data = choose_split(train_split, test_split, args.split, args.limit)?;
    let parts = args.parts.unwrap_or(if args.mode.is_patch() {
        TargetParts::Rgb
    } else {
        TargetParts::Both
    });
    let budget = AttackBudget {
        epsilon: args.eps,
        step_size: args.step_size.unwrap_or(0.25 * args.eps),
        iterations: args.steps,
        target_parts: parts,
        eps_scale: args.eps_scale,
    };

    let mut records = Vec::with_capacity(data.len());
    let mut successes = 0usize;
    let mut rejections = 0usize;
    let mut linf_sum = 0.0f64;
    for sample in &data.samples {
        let (x_rgb, x_depth) = sample.preprocess(&stats)?;
        let mut result = run_one_attack(
            &net,
            detector.as_ref(),
            &stats,
            args,
            &budget,
            seed,
            &sample.id,
            sample.label,
            &x_rgb,
            &x_depth,
        )?;
        // A detector given alongside a standard attack still judges the
        // final input, it just never steers the descent.
        if result.rejected.is_none() {
            if let Some(det) = &detector {
                let verdict =
                    defended_predict(&net, det, &result.adv_rgb, &result.adv_depth, RejectMode::Hard)?;
                result.rejected = Some(verdict.rejected);
            }
        }
        if result.success {
            successes += 1;
        }
        if result.rejected == Some(true) {
            rejections += 1;
        }
        linf_sum += f64::from(result.linf_norm());
        records.push(serde_json::json!({
            "id": sample.id,
            "true_label": sample.label,
            "clean_label": result.clean_label,
            "adv_label": result.adv_label,
            "rejected": result.rejected,
            "success": result.success,
            "linf_norm": result.linf_norm(),
            "patch_origin": result.patch_origin.map(|(r, c)| vec![r, c]),
            "loss_trace": result.loss_trace,
        }));
    }

    let n = data.len();
    let body = serde_json::json!({
        "config": {
            "command": "attack",
            "data": args.data.display().to_string(),
            "ckpt": args.ckpt.display().to_string(),
            "detector": args.detector.as_ref().map(|p| p.display().to_string()),
            "mode": args.mode.to_string(),
            "budget": serde_json::to_value(budget).map_err(encode_err)?,
            "patch_side": args.patch_side,
            "placement": args.placement.to_string(),
            "split": args.split.to_string(),
            "limit": args.limit,
            "seed": seed,
        },
        "summary": {
            "n": n,
            "success_rate": successes as f64 / n as f64,
            "rejection_rate": detector.as_ref().map(|_| rejections as f64 / n as f64),
            "mean_linf": linf_sum / n as f64,
        },
        "results": records,
    });
    write_json(&args.out, &body)?;
    log::info!(
        "attacked {} samples with {}: success rate {:.3}",
        n,
        args.mode,
        successes as f64 / n as f64
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one_attack(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    stats: &ChannelStats,
    args: &AttackArgs,
    budget: &AttackBudget,
    seed: u64,
    id: &str,
    label: usize,
    x_rgb: &Tensor,
    x_depth: &Tensor,
) -> Result<AttackResult> {
    match args.mode {
        AttackMode::Pgd => pgd_attack(net, stats, x_rgb, x_depth, label, budget),
        AttackMode::AdaptivePgd => {
            let det = detector.expect("checked by run_attack");
            adaptive_pgd_attack(net, det, stats, x_rgb, x_depth, label, budget)
        }
        AttackMode::Patch | AttackMode::AdaptivePatch => {
            let placement = match args.placement {
                CurvePlacement::FixedCenter => Placement::FixedCenter,
                CurvePlacement::RandomTranslation => Placement::RandomTranslation {
                    seed: sample_seed(seed, id),
                },
            };
            let patch = PatchSpec {
                side: args.patch_side.expect("checked by run_attack"),
                placement,
            };
            match args.mode {
                AttackMode::Patch => {
                    patch_attack(net, stats, x_rgb, x_depth, label, &patch, budget)
                }
                _ => {
                    let det = detector.expect("checked by run_attack");
                    adaptive_patch_attack(net, det, stats, x_rgb, x_depth, label, &patch, budget)
                }
            }
        }
    }
}

fn run_cka(seed: u64, args: &CkaArgs) -> Result<()> {
    let (train_split, test_split, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let net = load_net(&args.ckpt)?;
    let data = choose_split(train_split, test_split, args.split, args.limit)?;

    let hm = heatmap(&net, args.stream, &data, &stats, args.kernel, args.sigma_fraction)?;
    let redundancy = redundancy_score(&hm)?;
    write_text(&args.out, &heatmap_csv(&hm))?;
    write_json(
        &sidecar_path(&args.out),
        &serde_json::json!({
            "config": {
                "command": "cka",
                "data": args.data.display().to_string(),
                "ckpt": args.ckpt.display().to_string(),
                "stream": args.stream.to_string(),
                "kernel": args.kernel.to_string(),
                "sigma_fraction": args.sigma_fraction,
                "split": args.split.to_string(),
                "limit": args.limit,
                "seed": seed,
            },
            "layers": hm.layers(),
            "samples": hm.samples(),
            "redundancy": redundancy,
        }),
    )?;
    log::info!(
        "{} stream, {} kernel over {} samples: redundancy {:.4}",
        args.stream,
        args.kernel,
        hm.samples(),
        redundancy
    );
    Ok(())
}

fn run_calibrate(seed: u64, args: &CalibrateArgs) -> Result<()> {
    let (train_split, _, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let net = load_net(&args.ckpt)?;
    let cfg = CalibrationConfig {
        fpr_target: args.fpr,
        lambda: args.lambda,
        ..CalibrationConfig::default()
    };
    let (centroid_split, score_split) = match args.split {
        CalSplit::Train => (train_split.clone(), train_split),
        CalSplit::Heldout => heldout_split(&train_split),
    };
    let detector = calibrate(&net, &centroid_split, &score_split, &stats, &cfg)?;
    save_detector(&args.out, &detector)?;
    write_json(
        &sidecar_path(&args.out),
        &serde_json::json!({
            "config": {
                "command": "calibrate",
                "data": args.data.display().to_string(),
                "ckpt": args.ckpt.display().to_string(),
                "fpr": args.fpr,
                "lambda": args.lambda,
                "split": args.split.to_string(),
                "centroid_samples": centroid_split.len(),
                "score_samples": score_split.len(),
                "seed": seed,
            },
            "beta": detector.beta,
            "achieved_fpr": detector.achieved_fpr,
        }),
    )?;
    log::info!(
        "calibrated threshold {:.6} at achieved fpr {:.4} (target {:.4})",
        detector.beta,
        detector.achieved_fpr,
        args.fpr
    );
    Ok(())
}

fn run_evaluate(seed: u64, args: &EvaluateArgs) -> Result<()> {
    let (train_split, test_split, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let net = load_net(&args.ckpt)?;
    let detector = args.detector.as_deref().map(load_detector).transpose()?;
    let data = choose_split(train_split, test_split, args.split, args.limit)?;

    let parts = args.parts.unwrap_or(if args.mode.is_patch() {
        TargetParts::Rgb
    } else {
        TargetParts::Both
    });
    let spec = CurveSpec {
        mode: args.mode,
        levels: args.levels.0.clone(),
        steps: args.steps,
        step_fraction: args.step_fraction,
        patch_epsilon: args.patch_eps,
        target_parts: parts,
        eps_scale: args.eps_scale,
        placement: args.placement,
    };
    let curve = evaluate_curve(&net, detector.as_ref(), &data, &stats, &spec, seed)?;
    write_curve(&args.out, &curve, args.format)?;
    write_json(
        &sidecar_path(&args.out),
        &serde_json::json!({
            "config": {
                "command": "evaluate",
                "data": args.data.display().to_string(),
                "ckpt": args.ckpt.display().to_string(),
                "detector": args.detector.as_ref().map(|p| p.display().to_string()),
                "split": args.split.to_string(),
                "limit": args.limit,
                "format": args.format.to_string(),
                "seed": seed,
                "spec": serde_json::to_value(&spec).map_err(encode_err)?,
            },
            "defended": curve.defended,
            "n_samples": data.len(),
        }),
    )?;
    for p in &curve.points {
        log::info!(
            "level {}: undefended {:.3}, defended {:.3}, rejected {:.3}",
            p.level,
            p.accuracy_undefended,
            p.accuracy_defended,
            p.rejection_rate
        );
    }
    Ok(())
}

fn run_adv_train(seed: u64, args: &AdvTrainArgs) -> Result<()> {
    let (train_split, test_split, meta) = load_dataset(&args.data)?;
    let stats = meta.stats()?;
    let arch = Arch {
        image_size: meta.spec.image_size,
        ..Arch::toy(meta.spec.num_classes)
    };
    let mut net = FusionNet::new(args.variant, arch, seed)?;
    let cfg = TrainConfig {
        optimizer: args.optimizer,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed,
        ..TrainConfig::toy(seed)
    };
    let adv = AdvTrainConfig {
        epsilons: args.eps_list.0.clone(),
        steps: args.attack_steps,
        step_fraction: args.step_fraction,
        adversarial_fraction: args.mix,
        regenerate: !args.fixed_set,
        target_parts: args.parts,
        eps_scale: args.eps_scale,
    };
    let report = adversarial_train(&mut net, &train_split, &stats, &adv, &cfg)?;
    save_net(&args.out, &net)?;

    let test_accuracy = split_accuracy(&net, &test_split, &stats)?;
    let meta_path = args.out.join("train_meta.json");
    write_json(
        &meta_path,
        &serde_json::json!({
            "command": "adv-train",
            "data": args.data.display().to_string(),
            "variant": net.variant.to_string(),
            "config": serde_json::to_value(&cfg).map_err(encode_err)?,
            "augmentation": serde_json::to_value(&adv).map_err(encode_err)?,
            "seed": seed,
            "report": {
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "final_train_accuracy": report.final_train_accuracy,
                "epoch_losses": report.epoch_losses,
            },
            "test_accuracy": test_accuracy,
        }),
    )?;
    log::info!(
        "adversarially trained {} for {} epochs: clean test accuracy {:.3}",
        net.variant,
        cfg.epochs,
        test_accuracy
    );
    Ok(())
}

fn split_accuracy(net: &FusionNet, data: &Dataset, stats: &ChannelStats) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for sample in &data.samples {
        let (x_rgb, x_depth) = sample.preprocess(stats)?;
        if net.predict(&x_rgb, &x_depth)?.0 == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f32 / data.len() as f32)
}

fn choose_split(
    train_split: Dataset,
    test_split: Dataset,
    which: SplitChoice,
    limit: Option<usize>,
) -> Result<Dataset> {
    let mut data = match which {
        SplitChoice::Train => train_split,
        SplitChoice::Test => test_split,
    };
    if let Some(limit) = limit {
        if limit == 0 {
            return Err(Error::InvalidArgument("--limit must be at least 1".into()));
        }
        data.samples.truncate(limit);
    }
    Ok(data)
}

/// Split a training set into centroid and score halves, alternating within
/// each class so both halves keep the class balance. The centroid half
/// takes the first sample of every class and therefore always covers all
/// classes that appear.
fn heldout_split(data: &Dataset) -> (Dataset, Dataset) {
    let mut seen = vec![0usize; data.num_classes];
    let mut centroid = Vec::new();
    let mut score = Vec::new();
    for sample in &data.samples {
        let k = seen[sample.label];
        seen[sample.label] += 1;
        if k.is_multiple_of(2) {
            centroid.push(sample.clone());
        } else {
            score.push(sample.clone());
        }
    }
    let build = |samples| Dataset {
        samples,
        num_classes: data.num_classes,
        image_size: data.image_size,
        class_names: data.class_names.clone(),
    };
    (build(centroid), build(score))
}

/// `curve.csv` gets its config echo at `curve.csv.meta.json`.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn encode_err(e: serde_json::Error) -> Error {
    Error::Numerical(format!("cannot encode json artifact: {e}"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).map_err(encode_err)?;
    body.push('\n');
    write_text(path, &body)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate;

    #[test]
    fn level_lists_must_increase_strictly() {
        assert_eq!(parse_levels("0,0.05,0.1").unwrap().0, vec![0.0, 0.05, 0.1]);
        assert_eq!(parse_levels("0.3").unwrap().0, vec![0.3]);
        assert!(parse_levels("0.1,0.05").is_err(), "unordered");
        assert!(parse_levels("0,0").is_err(), "duplicates");
        assert!(parse_levels("0,abc").is_err());
        assert!(parse_levels("").is_err());
        assert!(parse_levels("0,inf").is_err());
    }

    #[test]
    fn usage_errors_surface_at_parse_time() {
        // Missing required flag.
        let err = Cli::try_parse_from(["fuseguard", "evaluate", "--data", "d"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument);
        // Unknown flag.
        let err = Cli::try_parse_from(["fuseguard", "generate", "--frobnicate"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::UnknownArgument);
        // Unknown subcommand.
        assert!(Cli::try_parse_from(["fuseguard", "explode"]).is_err());
    }

    #[test]
    fn seed_defaults_to_zero_and_parses_anywhere() {
        let cli = Cli::try_parse_from(["fuseguard", "generate", "--out", "d"]).unwrap();
        assert_eq!(cli.seed, 0);
        let cli =
            Cli::try_parse_from(["fuseguard", "generate", "--out", "d", "--seed", "7"]).unwrap();
        assert_eq!(cli.seed, 7);
    }

    #[test]
    fn unordered_curve_levels_are_a_usage_error() {
        let err = Cli::try_parse_from([
            "fuseguard", "evaluate", "--data", "d", "--ckpt", "c", "--out", "o", "--mode", "pgd",
            "--levels", "0,0.2,0.1",
        ])
        .unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ValueValidation);
    }

    #[test]
    fn sidecars_sit_next_to_their_artifact() {
        assert_eq!(
            sidecar_path(Path::new("runs/curve.csv")),
            PathBuf::from("runs/curve.csv.meta.json")
        );
    }

    #[test]
    fn heldout_splitting_alternates_within_each_class() {
        let spec = DatasetSpec {
            num_classes: 3,
            train_per_class: 5,
            test_per_class: 1,
            image_size: 16,
            texture_policy: TexturePolicy::Distinct,
            depth_noise_std: 0.0,
            seed: 2,
        };
        let (train_split, _) = generate(&spec).unwrap();
        let (centroid, score) = heldout_split(&train_split);
        assert_eq!(centroid.len() + score.len(), train_split.len());
        for k in 0..3 {
            let c = centroid.samples.iter().filter(|s| s.label == k).count();
            let s = score.samples.iter().filter(|s| s.label == k).count();
            assert_eq!(c, 3, "class {k} centroid half");
            assert_eq!(s, 2, "class {k} score half");
        }
        let mut ids: Vec<&str> = centroid
            .samples
            .iter()
            .chain(&score.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), train_split.len(), "halves are disjoint");
    }
}

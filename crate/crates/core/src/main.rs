use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use densegrad::augment::AugmentationPolicy;
use densegrad::data::{generate_synthetic, read_split_csv, scan_dataset, stratified_split, Placement, Split, SplitRatios, SynthOptions, TaskMode};
use densegrad::gradcam::{Colormap, GradCamOptions, Signal, DEFAULT_ALPHA};
use densegrad::model::{trainable_param_count, DenseNetConfig};
use densegrad::run::{
    augment_preview, best_checkpoint, eval_checkpoint, explain_files, parse_override, parse_pairs, run_dir_of_checkpoint,
    train_run, ExplainSettings, RunConfig, TargetSpec, EXPLAIN_DIR, SPLIT_FILE,
};
use densegrad::train::EpochRecord;

#[derive(Parser)]
#[command(name = "densegrad", version, about = "Densely connected CNN training, evaluation and Grad-CAM")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "DENSEGRAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural 18-class dataset.
    Synth(SynthArgs),
    /// Split, train and evaluate; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Write Grad-CAM heatmaps and overlays.
    Explain(ExplainArgs),
    /// Print the trainable parameter count of a preset.
    Params(ParamsArgs),
    /// Write before/after augmentation grids.
    AugmentPreview(PreviewArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Centered,
    Quadrant,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    per_class: u32,
    /// Side length in pixels.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(8..))]
    resolution: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PlacementArg::Centered)]
    placement: PlacementArg,
    /// Regenerate into a scratch directory and compare bytes with `--out`.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags and `--set` override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.max_epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Square input side; sets both dataset.height and dataset.width.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `$DENSEGRAD_OUT` when set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }

    fn name(self) -> &'static str {
        self.split().map_or("all", Split::name)
    }
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false, args = ["checkpoint", "run"])]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory; uses its best checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
}

impl CheckpointArgs {
    fn checkpoint(&self) -> PathBuf {
        match (&self.checkpoint, &self.run) {
            (Some(c), _) => c.clone(),
            (None, Some(r)) => best_checkpoint(r),
            (None, None) => unreachable!("clap requires one of the two"),
        }
    }

    fn run_dir(&self) -> Option<PathBuf> {
        self.run.clone().or_else(|| run_dir_of_checkpoint(&self.checkpoint()))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Split assignment; defaults to the run directory's split.csv.
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Scan and split this dataset instead of reading a split file.
    #[arg(long, conflicts_with = "split_file")]
    dataset: Option<PathBuf>,
    /// Seed for splitting `--dataset`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report task; a fine18 model may be reported as fruit6 or quality3.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColormapArg {
    Jet,
    Gray,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Image files or directories.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// `predicted`, `true` (class from the folder name) or a class index.
    #[arg(long, default_value = "predicted")]
    target: String,
    /// `logit` or `loss`.
    #[arg(long, default_value = "logit")]
    signal: String,
    /// Convolution to explain; defaults to the last one.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f32,
    #[arg(long, value_enum, default_value_t = ColormapArg::Jet)]
    colormap: ColormapArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value = "densenet201", value_parser = ["densenet201", "tiny"])]
    preset: String,
    #[arg(long, default_value_t = 18, value_parser = clap::value_parser!(u32).range(1..))]
    classes: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Default,
    None,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Default)]
    policy: PolicyArg,
    /// Override a policy field, e.g. `--set augment.rotation_max_deg=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epoch: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    variants: u32,
    /// Side length of each tile.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(2..))]
    resolution: u32,
}

/// Exit status 2 for bad invocations, 1 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let head: Vec<&str> = text
                .lines()
                .take_while(|l| !l.trim().is_empty() && !l.starts_with("Usage:"))
                .map(str::trim)
                .collect();
            eprintln!("error: {}", head.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {}", one_line(&e.to_string()));
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Params(a) => params(a),
        Command::AugmentPreview(a) => preview(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let options = SynthOptions {
        per_class: a.per_class as usize,
        height: a.resolution as usize,
        width: a.resolution as usize,
        seed: a.seed,
        placement: match a.placement {
            PlacementArg::Centered => Placement::Centered,
            PlacementArg::Quadrant => Placement::Quadrant,
        },
    };
    if !a.check {
        let summary = generate_synthetic(&a.out, &options).map_err(runtime)?;
        print!("{summary}");
        println!("wrote {}", a.out.display());
        return Ok(());
    }
    if !a.out.is_dir() {
        return Err(runtime(format!("{} does not exist; nothing to check", a.out.display())));
    }
    let scratch = PathBuf::from(format!("{}.check-{}", a.out.display(), std::process::id()));
    let result = generate_synthetic(&scratch, &options)
        .map_err(runtime)
        .and_then(|_| compare_trees(&scratch, &a.out));
    let _ = std::fs::remove_dir_all(&scratch);
    let files = result?;
    println!("identical: {files} files match {}", a.out.display());
    Ok(())
}

fn list_files(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out).map_err(|e| runtime(format!("{}: {e}", root.display())))?;
    out.sort();
    Ok(out)
}

/// Number of files when both trees hold identical bytes.
fn compare_trees(fresh: &Path, existing: &Path) -> Result<usize, Failure> {
    let expected = list_files(fresh)?;
    let found = list_files(existing)?;
    if expected != found {
        return Err(runtime(format!(
            "{} holds {} files but the generator produces {}",
            existing.display(),
            found.len(),
            expected.len()
        )));
    }
    for rel in &expected {
        let read = |root: &Path| std::fs::read(root.join(rel)).map_err(|e| runtime(format!("{}: {e}", rel.display())));
        if read(fresh)? != read(existing)? {
            return Err(runtime(format!("{} differs from the regenerated file", existing.join(rel).display())));
        }
    }
    Ok(expected.len())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut pairs = Vec::new();
    if let Some(out) = std::env::var_os("DENSEGRAD_OUT") {
        pairs.push(("output.dir".to_string(), PathBuf::from(out).display().to_string()));
    }
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_pairs(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?);
    }
    let flag = |key: &str, value: Option<String>| value.map(|v| (key.to_string(), v));
    pairs.extend(
        [
            flag("dataset.root", a.dataset.as_ref().map(|p| p.display().to_string())),
            flag("task", a.task.clone()),
            flag("model.preset", a.preset.clone()),
            flag("train.max_epochs", a.epochs.map(|e| e.to_string())),
            flag("dataset.height", a.resolution.map(|r| r.to_string())),
            flag("dataset.width", a.resolution.map(|r| r.to_string())),
            flag("seed", a.seed.map(|s| s.to_string())),
            flag("output.dir", a.out.as_ref().map(|p| p.display().to_string())),
        ]
        .into_iter()
        .flatten(),
    );
    for o in &a.overrides {
        pairs.push(parse_override(o).map_err(usage)?);
    }
    let config = RunConfig::from_pairs(&pairs).map_err(usage)?;
    config.validate().map_err(usage)?;
    Ok(config)
}

fn train(a: TrainArgs) -> Outcome {
    let config = resolve_train_config(&a)?;
    let quiet = a.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            let event = if r.event.is_empty() { String::new() } else { format!("  [{}]", r.event) };
            println!(
                "epoch {:>4}  lr {:.2e}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s{event}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_secs
            );
        }
    };
    let summary = train_run(&config, a.resume, Some(&mut progress)).map_err(runtime)?;
    let h = &summary.history;
    println!(
        "stopped: {} after {} epochs; best epoch {}",
        h.stop_reason.map_or("unknown".into(), |r| r.to_string()),
        h.epochs.len(),
        h.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    println!("{} accuracy ({}): {:.4}", summary.eval_split.name(), config.train.task, summary.metrics.accuracy);
    for (task, report) in &summary.projections {
        println!("{} accuracy ({task}, projected): {:.4}", summary.eval_split.name(), report.accuracy);
    }
    println!("run directory: {}", summary.run_dir.display());
    Ok(())
}

fn parse_task(task: &Option<String>) -> Result<Option<TaskMode>, Failure> {
    task.as_deref().map(str::parse).transpose().map_err(usage)
}

fn eval(a: EvalArgs) -> Outcome {
    let checkpoint = a.source.checkpoint();
    let run_dir = a.source.run_dir();
    let report_task = parse_task(&a.task)?;
    let records = match (&a.dataset, &a.split_file, &run_dir) {
        (Some(root), _, _) => {
            let index = scan_dataset(root).map_err(runtime)?;
            stratified_split(&index.records, SplitRatios::default(), a.seed).map_err(runtime)?
        }
        (None, Some(file), _) => read_split_csv(file).map_err(runtime)?,
        (None, None, Some(run)) => read_split_csv(run.join(SPLIT_FILE)).map_err(runtime)?,
        (None, None, None) => {
            return Err(usage("no split assignment: pass --split-file or --dataset, or a checkpoint inside a run directory"))
        }
    };
    let task_name = report_task.map_or("model".to_string(), |t| t.cli_name().to_string());
    let out = a.out.clone().unwrap_or_else(|| {
        run_dir
            .unwrap_or_else(|| PathBuf::from("."))
            .join("eval")
            .join(format!("{}_{task_name}", a.split.name()))
    });
    let report = eval_checkpoint(&checkpoint, &records, a.split.split(), report_task, Some(&out)).map_err(runtime)?;
    print!("{}", report.to_table());
    println!("accuracy: {:.4}", report.accuracy);
    println!("wrote {}", out.display());
    Ok(())
}

fn explain(a: ExplainArgs) -> Outcome {
    let checkpoint = a.source.checkpoint();
    let target: TargetSpec = a.target.parse().map_err(usage)?;
    let signal: Signal = a.signal.parse().map_err(usage)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha must be in [0, 1], got {}", a.alpha)));
    }
    let out = a.out.clone().unwrap_or_else(|| {
        a.source.run_dir().unwrap_or_else(|| PathBuf::from(".")).join(EXPLAIN_DIR)
    });
    let settings = ExplainSettings {
        target,
        gradcam: GradCamOptions {
            layer: a.layer.clone(),
            signal,
        },
        colormap: match a.colormap {
            ColormapArg::Jet => Colormap::Jet,
            ColormapArg::Gray => Colormap::Gray,
        },
        alpha: a.alpha,
    };
    let records = explain_files(&checkpoint, &a.inputs, &settings, &out).map_err(runtime)?;
    for r in &records {
        let peak = match (r.peak_row, r.peak_col) {
            (Some(y), Some(x)) => format!("({y}, {x})"),
            _ => "none (zero map)".into(),
        };
        println!("{}: predicted {}, target {}, peak {peak}", r.input.display(), r.predicted, r.target);
    }
    println!("wrote {} explanations to {}", records.len(), out.display());
    Ok(())
}

fn params(a: ParamsArgs) -> Outcome {
    let config = DenseNetConfig::preset(&a.preset, a.classes as usize).map_err(usage)?;
    let count = trainable_param_count(&config).map_err(runtime)?;
    println!("preset: {}", a.preset);
    println!("classes: {}", a.classes);
    println!("trainable parameters: {count}");
    println!("millions: {:.2}M", count as f64 / 1e6);
    Ok(())
}

fn preview(a: PreviewArgs) -> Outcome {
    let mut config = RunConfig::default();
    config.augment = match a.policy {
        PolicyArg::Default => AugmentationPolicy::default(),
        PolicyArg::None => AugmentationPolicy::none(),
    };
    for o in &a.overrides {
        let (key, value) = parse_override(o).map_err(usage)?;
        if !key.starts_with("augment.") || key == "augment.enabled" {
            return Err(usage(format!("`{key}` is not a policy field")));
        }
        config.set(&key, &value).map_err(usage)?;
    }
    config.augment.validate().map_err(usage)?;
    let side = a.resolution as usize;
    let summary = augment_preview(
        &a.inputs,
        &config.augment,
        a.seed,
        a.epoch,
        a.variants as usize,
        (side, side),
        &a.out,
    )
    .map_err(runtime)?;
    println!(
        "wrote {} previews to {}; changed {} of {} augmented tiles",
        summary.files.len(),
        a.out.display(),
        summary.changed,
        summary.tiles
    );
    Ok(())
}

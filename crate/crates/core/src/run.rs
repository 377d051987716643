//! Run configuration and the end-to-end pipelines behind the command line.
//!
//! A run directory holds `config.resolved`, `split.csv`, `history.csv`,
//! `checkpoints/`, `metrics.json`/`metrics.txt` and, after `explain`,
//! `explain/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, sample_stream, sample_transform, AugmentationPolicy, FillMode, Interpolation};
use crate::data::{
    channel_stats, class_of_path, decode_image, read_split_csv, resize_bilinear, save_png, scan_dataset,
    stratified_split, write_split_csv, MemorySource, Normalization, SampleRecord, SampleSource, Split, SplitRatios,
    TaskMode,
    IMAGE_EXTENSIONS,
};
use crate::error::{Error, Result};
use crate::gradcam::{explain, render_heatmap, render_overlay, write_explain_index, Colormap, ExplainRecord, GradCamOptions, Target};
use crate::metrics::MetricsReport;
use crate::model::{load_checkpoint, DenseNetConfig, Model};
use crate::tensor::Tensor;
use crate::train::{
    evaluate, read_checkpoint_metadata, train, EpochRecord, Monitor, TrainConfig, TrainHistory, TrainOptions,
    BEST_CHECKPOINT,
};

pub const CONFIG_FILE: &str = "config.resolved";
pub const SPLIT_FILE: &str = "split.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PROJECTIONS_DIR: &str = "projections";
pub const EXPLAIN_DIR: &str = "explain";
pub const EXPLAIN_INDEX: &str = "index.csv";
/// Evaluation batch size; fixed so that re-evaluation is bitwise repeatable.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Per-channel mean and standard deviation of the train split.
    #[default]
    Standardize,
    None,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub normalization: NormalizationMode,
    pub split: SplitRatios,
    /// Preset the model fields started from.
    pub preset: String,
    /// `num_classes` and `input_resolution` follow `train.task`, `height` and
    /// `width`.
    pub model: DenseNetConfig,
    /// Holds the task and the seed shared by splitting, initialization,
    /// shuffling and augmentation.
    pub train: TrainConfig,
    pub augment_enabled: bool,
    pub augment: AugmentationPolicy,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut config = Self {
            dataset_root: PathBuf::from("data"),
            height: 256,
            width: 256,
            normalization: NormalizationMode::Standardize,
            split: SplitRatios::default(),
            preset: "densenet201".into(),
            model: DenseNetConfig::densenet201(train.task.num_classes()),
            train,
            augment_enabled: true,
            augment: AugmentationPolicy::default(),
            output_dir: PathBuf::from("runs/latest"),
        };
        config.sync();
        config
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        pairs.push(parse_override(line).map_err(|_| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?);
    }
    Ok(pairs)
}

/// One `key=value` assignment.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected `key=value`, got `{text}`"))),
    }
}

impl RunConfig {
    /// Defaults with `pairs` applied in order, except that `model.preset` is
    /// applied first so explicit model fields refine it.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some((_, preset)) = pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            config.set("model.preset", preset)?;
        }
        for (key, value) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            config.set(key, value)?;
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn sync(&mut self) {
        self.model.num_classes = self.train.task.num_classes();
        self.model.input_resolution = (self.height, self.width, 3);
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset.root" => self.dataset_root = PathBuf::from(v),
            "dataset.height" => self.height = parse_value(key, v)?,
            "dataset.width" => self.width = parse_value(key, v)?,
            "dataset.normalization" => {
                self.normalization = match v {
                    "standardize" => NormalizationMode::Standardize,
                    "none" => NormalizationMode::None,
                    _ => return Err(Error::Config(format!("{key}: expected standardize or none, got `{v}`"))),
                }
            }
            "split.train" => self.split.train = parse_value(key, v)?,
            "split.val" => self.split.val = parse_value(key, v)?,
            "split.test" => self.split.test = parse_value(key, v)?,
            "task" => self.train.task = parse_value(key, v)?,
            "seed" => self.train.seed = parse_value(key, v)?,
            "model.preset" => {
                self.model = DenseNetConfig::preset(v, self.train.task.num_classes())?;
                self.preset = v.to_string();
            }
            "model.growth_rate" => self.model.growth_rate = parse_value(key, v)?,
            "model.block_layout" => {
                self.model.block_layout = v
                    .split(',')
                    .map(|n| parse_value(key, n.trim()))
                    .collect::<Result<_>>()?
            }
            "model.bottleneck" => self.model.bottleneck = parse_bool(key, v)?,
            "model.compression" => self.model.compression = parse_value(key, v)?,
            "model.stem_channels" => self.model.stem_channels = parse_value(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse_value(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_value(key, v)?,
            "train.lr_decay_patience" => self.train.lr_decay_patience = parse_value(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse_value(key, v)?,
            "train.min_delta" => self.train.min_delta = parse_value(key, v)?,
            "train.monitor" => self.train.monitor = parse_value::<Monitor>(key, v)?,
            "augment.enabled" => self.augment_enabled = parse_bool(key, v)?,
            "augment.rotation_max_deg" => self.augment.rotation_max_deg = parse_value(key, v)?,
            "augment.width_shift_frac" => self.augment.width_shift_frac = parse_value(key, v)?,
            "augment.height_shift_frac" => self.augment.height_shift_frac = parse_value(key, v)?,
            "augment.shear_max_deg" => self.augment.shear_max_deg = parse_value(key, v)?,
            "augment.hflip_prob" => self.augment.hflip_prob = parse_value(key, v)?,
            "augment.vflip_prob" => self.augment.vflip_prob = parse_value(key, v)?,
            "augment.fill_mode" => {
                self.augment.fill_mode = match v {
                    "nearest" => FillMode::Nearest,
                    "constant" => match self.augment.fill_mode {
                        FillMode::Constant(c) => FillMode::Constant(c),
                        FillMode::Nearest => FillMode::Constant(0.0),
                    },
                    _ => return Err(Error::Config(format!("{key}: expected nearest or constant, got `{v}`"))),
                }
            }
            "augment.fill_value" => {
                let c = parse_value(key, v)?;
                if let FillMode::Constant(_) = self.augment.fill_mode {
                    self.augment.fill_mode = FillMode::Constant(c);
                } else {
                    return Err(Error::Config(format!("{key}: set augment.fill_mode = constant first")));
                }
            }
            "augment.interpolation" => {
                if v != "bilinear" {
                    return Err(Error::Config(format!("{key}: only bilinear is supported, got `{v}`")));
                }
                self.augment.interpolation = Interpolation::Bilinear;
            }
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Every key with its value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let a = &self.augment;
        let mut out = vec![
            ("dataset.root", self.dataset_root.display().to_string()),
            ("dataset.height", self.height.to_string()),
            ("dataset.width", self.width.to_string()),
            (
                "dataset.normalization",
                match self.normalization {
                    NormalizationMode::Standardize => "standardize",
                    NormalizationMode::None => "none",
                }
                .into(),
            ),
            ("split.train", self.split.train.to_string()),
            ("split.val", self.split.val.to_string()),
            ("split.test", self.split.test.to_string()),
            ("task", t.task.cli_name().into()),
            ("seed", t.seed.to_string()),
            ("model.preset", self.preset.clone()),
            ("model.growth_rate", m.growth_rate.to_string()),
            (
                "model.block_layout",
                m.block_layout.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("model.bottleneck", m.bottleneck.to_string()),
            ("model.compression", m.compression.to_string()),
            ("model.stem_channels", m.stem_channels.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_patience", t.lr_decay_patience.to_string()),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.min_delta", t.min_delta.to_string()),
            ("train.monitor", t.monitor.to_string()),
            ("augment.enabled", self.augment_enabled.to_string()),
            ("augment.rotation_max_deg", a.rotation_max_deg.to_string()),
            ("augment.width_shift_frac", a.width_shift_frac.to_string()),
            ("augment.height_shift_frac", a.height_shift_frac.to_string()),
            ("augment.shear_max_deg", a.shear_max_deg.to_string()),
            ("augment.hflip_prob", a.hflip_prob.to_string()),
            ("augment.vflip_prob", a.vflip_prob.to_string()),
        ];
        match a.fill_mode {
            FillMode::Nearest => out.push(("augment.fill_mode", "nearest".into())),
            FillMode::Constant(c) => {
                out.push(("augment.fill_mode", "constant".into()));
                out.push(("augment.fill_value", c.to_string()));
            }
        }
        out.push(("augment.interpolation", "bilinear".into()));
        out.push(("output.dir", self.output_dir.display().to_string()));
        out
    }

    /// The resolved configuration as `key = value` text; parses back to an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(text, "{k} = {v}");
        }
        text
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.augment.validate()?;
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "resolution must be at least 8×8, got {}×{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Policy used during training.
    pub fn policy(&self) -> AugmentationPolicy {
        if self.augment_enabled {
            self.augment
        } else {
            AugmentationPolicy::none()
        }
    }
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub history: TrainHistory,
    /// Split the reported metrics were computed on.
    pub eval_split: Split,
    pub metrics: MetricsReport,
    /// Fruit6 and Quality3 reports of a fine-grained model.
    pub projections: Vec<(TaskMode, MetricsReport)>,
}

fn select(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == Some(split)).cloned().collect()
}

/// Split → train → evaluate, writing the run directory.
pub fn train_run(
    config: &RunConfig,
    resume: bool,
    on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<RunSummary> {
    config.validate()?;
    if !config.dataset_root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist or is not a directory",
            config.dataset_root.display()
        )));
    }
    let run_dir = config.output_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let config_path = run_dir.join(CONFIG_FILE);
    if resume && config_path.exists() {
        // Only the epoch budget may change across a resume.
        let mut previous = RunConfig::load(&config_path)?;
        previous.train.max_epochs = config.train.max_epochs;
        previous.output_dir.clone_from(&config.output_dir);
        if previous != *config {
            let changed: Vec<String> = previous
                .entries()
                .into_iter()
                .zip(config.entries())
                .filter(|(a, b)| a != b)
                .map(|(_, (k, v))| format!("{k}={v}"))
                .collect();
            return Err(Error::Config(format!(
                "cannot resume: {} differs from the requested configuration ({})",
                config_path.display(),
                changed.join(", ")
            )));
        }
    }
    std::fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;

    let split_path = run_dir.join(SPLIT_FILE);
    let records = if resume && split_path.exists() {
        read_split_csv(&split_path)?
    } else {
        let index = scan_dataset(&config.dataset_root)?;
        let records = stratified_split(&index.records, config.split, config.train.seed)?;
        write_split_csv(&split_path, &records)?;
        records
    };

    let load = |split| MemorySource::load(&select(&records, split), config.height, config.width);
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    let test_set = load(Split::Test)?;
    let normalization = match config.normalization {
        NormalizationMode::Standardize => channel_stats(&train_set)?,
        NormalizationMode::None => Normalization::None,
    };

    let mut model = Model::<f32>::build(config.model.clone(), config.train.seed)?;
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &config.train,
        TrainOptions {
            policy: config.policy(),
            normalization,
            run_dir: Some(run_dir.clone()),
            resume,
            on_epoch,
        },
    )?;

    let (eval_split, eval_set) = if test_set.is_empty() {
        (Split::Val, &val_set)
    } else {
        (Split::Test, &test_set)
    };
    let task = config.train.task;
    let metrics = evaluate(&model, eval_set, &normalization, task, task, EVAL_BATCH)?;
    metrics.write(&run_dir)?;
    let mut projections = Vec::new();
    if task == TaskMode::FineGrained18 {
        for coarse in [TaskMode::Fruit6, TaskMode::Quality3] {
            let report = evaluate(&model, eval_set, &normalization, task, coarse, EVAL_BATCH)?;
            report.write(&run_dir.join(PROJECTIONS_DIR).join(coarse.cli_name()))?;
            projections.push((coarse, report));
        }
    }
    Ok(RunSummary {
        run_dir,
        history: outcome.history,
        eval_split,
        metrics,
        projections,
    })
}

/// Run directory a checkpoint at `<run>/checkpoints/<name>` belongs to.
pub fn run_dir_of_checkpoint(checkpoint: &Path) -> Option<PathBuf> {
    let dir = checkpoint.parent()?;
    if dir.file_name()? == crate::train::CHECKPOINT_DIR {
        dir.parent().map(Path::to_path_buf)
    } else {
        None
    }
}

/// Best checkpoint of a run directory.
pub fn best_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(BEST_CHECKPOINT)
}

/// Metrics of a checkpoint on the `split` members of `records` (all of them
/// when `split` is `None`), reported under `report_task` or the model's own
/// task. Written to `out_dir` when given.
pub fn eval_checkpoint(
    checkpoint: &Path,
    records: &[SampleRecord],
    split: Option<Split>,
    report_task: Option<TaskMode>,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let (model_task, normalization) = read_checkpoint_metadata(&ckpt.metadata)?;
    if ckpt.model.config().num_classes != model_task.num_classes() {
        return Err(Error::Config(format!(
            "{} has {} outputs but is tagged {model_task}",
            checkpoint.display(),
            ckpt.model.config().num_classes
        )));
    }
    let members: Vec<SampleRecord> = match split {
        Some(s) => select(records, s),
        None => records.to_vec(),
    };
    if members.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples in the {} split",
            split.map_or("requested", Split::name)
        )));
    }
    let (h, w, _) = ckpt.model.config().input_resolution;
    let source = MemorySource::load(&members, h, w)?;
    let report_task = report_task.unwrap_or(model_task);
    let report = evaluate(&ckpt.model, &source, &normalization, model_task, report_task, EVAL_BATCH)?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Image files named directly or found recursively under directories, sorted
/// per argument.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            walk(input, &mut files)?;
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(Error::Dataset(format!("input {} does not exist", input.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset("no input images found".into()));
    }
    Ok(files)
}

/// Target class choice for [`explain_files`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    Predicted,
    /// Class implied by the image's folder.
    True,
    Class(usize),
}

impl FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(TargetSpec::Predicted),
            "true" => Ok(TargetSpec::True),
            other => other
                .parse()
                .map(TargetSpec::Class)
                .map_err(|_| Error::Config(format!("target must be predicted, true or a class index, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExplainSettings {
    pub target: TargetSpec,
    pub gradcam: GradCamOptions,
    pub colormap: Colormap,
    pub alpha: f32,
}

/// Writes a heatmap and an overlay per input plus `index.csv` into
/// `out_dir`.
pub fn explain_files(
    checkpoint: &Path,
    inputs: &[PathBuf],
    settings: &ExplainSettings,
    out_dir: &Path,
) -> Result<Vec<ExplainRecord>> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let (task, normalization) = read_checkpoint_metadata(&ckpt.metadata)?;
    let model = ckpt.model;
    let (h, w, _) = model.config().input_resolution;
    let labels = task.label_names();
    let files = expand_inputs(inputs)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let image = resize_bilinear(&decode_image(path)?, h, w)?;
        let mut input = image.clone();
        normalization.apply(&mut input);
        let target = match settings.target {
            TargetSpec::Predicted => Target::Predicted,
            TargetSpec::Class(k) => Target::Class(k),
            TargetSpec::True => {
                let class = class_of_path(path).ok_or_else(|| {
                    Error::Dataset(format!("cannot infer the class of {} from its folder", path.display()))
                })?;
                Target::Class(task.label(class))
            }
        };
        let heatmap = explain(&model, &input, target, &settings.gradcam)?;
        let stem = path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
        let heatmap_path = out_dir.join(format!("{i:04}_{stem}_heatmap.png"));
        let overlay_path = out_dir.join(format!("{i:04}_{stem}_overlay.png"));
        render_heatmap(&heatmap, settings.colormap, &heatmap_path)?;
        render_overlay(&image, &heatmap, settings.colormap, settings.alpha, &overlay_path)?;
        records.push(ExplainRecord {
            input: path.clone(),
            predicted: labels[heatmap.predicted_class].clone(),
            target: labels[heatmap.target_class].clone(),
            peak_row: heatmap.peak.map(|p| p.0),
            peak_col: heatmap.peak.map(|p| p.1),
            heatmap: heatmap_path,
            overlay: overlay_path,
        });
    }
    write_explain_index(out_dir.join(EXPLAIN_INDEX), &records)?;
    Ok(records)
}

/// Result of [`augment_preview`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreviewSummary {
    pub files: Vec<PathBuf>,
    /// Augmented tiles that differ from their source.
    pub changed: usize,
    pub tiles: usize,
}

/// Pixels between preview tiles.
pub const PREVIEW_GAP: usize = 2;

/// One PNG per input: the resized source followed by `variants` augmented
/// copies drawn from the streams of epochs `epoch..epoch + variants`.
pub fn augment_preview(
    inputs: &[PathBuf],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
    variants: usize,
    (height, width): (usize, usize),
    out_dir: &Path,
) -> Result<PreviewSummary> {
    policy.validate()?;
    if variants == 0 || height < 2 || width < 2 {
        return Err(Error::Config("preview needs at least one variant and a 2×2 resolution".into()));
    }
    let files = expand_inputs(inputs)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tiles = variants + 1;
    let grid_w = tiles * width + (tiles - 1) * PREVIEW_GAP;
    let mut summary = PreviewSummary {
        files: Vec::new(),
        changed: 0,
        tiles: 0,
    };
    for (i, path) in files.iter().enumerate() {
        let source = resize_bilinear(&decode_image(path)?, height, width)?;
        let mut grid = Tensor::full([3, height, grid_w], 1.0f32);
        let mut paste = |tile: &Tensor<f32>, slot: usize| {
            let x0 = slot * (width + PREVIEW_GAP);
            for c in 0..3 {
                for y in 0..height {
                    let src = &tile.data()[(c * height + y) * width..][..width];
                    grid.data_mut()[(c * height + y) * grid_w + x0..][..width].copy_from_slice(src);
                }
            }
        };
        paste(&source, 0);
        for v in 0..variants {
            let mut rng = sample_stream(seed, epoch + v as u64, i as u64);
            let t = sample_transform(policy, &mut rng, height, width);
            let out = apply_transform(&source, &t, policy)?;
            summary.changed += usize::from(out != source);
            summary.tiles += 1;
            paste(&out, v + 1);
        }
        let stem = path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
        let file = out_dir.join(format!("{i:04}_{stem}_preview.png"));
        save_png(&grid, &file)?;
        summary.files.push(file);
    }
    Ok(summary)
}

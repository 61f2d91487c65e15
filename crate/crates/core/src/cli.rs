//! Command-line front end: `segment`, `eval`, `sweep` and `doctor`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or internal error |
//! | 2 | configuration or manifest error (bad flags, dataset layout, empty grid) |
//! | 3 | partial failure (an image failed, predictions missing) |

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{MuSchedule, RunConfig, TrainMode};
use crate::datasets::{
    coco, doctor, load_manifest_with, resize_labels, resize_shorter_side, DatasetManifest, DatasetName, GroundTruth,
    ManifestOptions, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, assign, average_reports, bsd500_scores, ConfusionMatrix, EvalReport};
use crate::label_io::{overlay, read_image, read_label_map, write_label_map};
use crate::trainer::{segment_batch, train_dataset, write_log};
use crate::types::{ImageTensor, LabelMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Name of the effective-config file written into every output directory.
pub const CONFIG_ECHO: &str = "dynaseg.cfg";

#[derive(Debug, Parser)]
#[command(name = "dynaseg", version, about = "Unsupervised segmentation with dynamic loss weighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment images and write label maps, overlays and training logs.
    Segment(SegmentArgs),
    /// Score a directory of predicted label maps against a dataset.
    Eval(EvalArgs),
    /// Segment and score a dataset for every value of a parameter grid.
    Sweep(SweepArgs),
    /// Check a dataset layout.
    Doctor(DoctorArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Fsf,
    Scf,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Cnn,
    ResnetFpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Mu,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed balancing weight (implies `--schedule fixed`).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Iteration cap T.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// ImageNet weights for the residual encoder (safetensors).
    #[arg(long)]
    pub weights_path: Option<PathBuf>,
    /// Stop on the silhouette-selected cluster count (default).
    #[arg(long, conflicts_with = "threshold")]
    pub silhouette: bool,
    /// Stop once the cluster count reaches K.
    #[arg(long, value_name = "K")]
    pub threshold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, e.g. `--set lr=0.05`; applied before the dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for per-image work.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// bsd500, voc2012, coco_stuff or synthetic.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// File listing the ids to use, one per line.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Replacement fine-to-coarse table for COCO-Stuff.
    #[arg(long)]
    pub merge_table: Option<PathBuf>,
    /// Use only the first N ids.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Synthetic corpus: regions per image.
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    /// Synthetic corpus: image side length.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Synthetic corpus: Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    /// Synthetic corpus: number of images.
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    /// Synthetic corpus: generator seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    /// Image file(s) to segment.
    #[arg(long, conflicts_with = "dataset")]
    pub image: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory (default: next to each image, or `dynaseg_out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory of `<id>.labels.png` (or `<id>.png`) maps.
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Report directory (default: the prediction directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value_t = SweepParam::Alpha)]
    pub param: SweepParam,
    /// Comma-separated grid.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// CSV file; existing rows for the same grid point are skipped.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DoctorArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Doctor(a) => cmd_doctor(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::WeightsUnavailable(_)
        | Error::MissingRoot(_)
        | Error::CorruptLayout(_)
        | Error::ShapeMismatch(_)
        | Error::EmptyBatch => EXIT_CONFIG,
        Error::Io(_) | Error::Tensor(_) => EXIT_IO,
        _ => EXIT_PARTIAL,
    }
}

/// Default, then config file, then `--set`, then dedicated flags.
pub fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.merge_str(&fs::read_to_string(path)?)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = args.schedule {
        let name = match s {
            ScheduleArg::Fsf => "fsf",
            ScheduleArg::Scf => "scf",
            ScheduleArg::Fixed => "fixed",
        };
        cfg.set("schedule", name)?;
        if args.mu.is_some() && s != ScheduleArg::Fixed {
            return Err(Error::Config(format!("--mu needs the fixed schedule, not {name}")));
        }
    }
    if let Some(a) = args.alpha {
        cfg.set("alpha", &a.to_string())?;
    }
    if let Some(m) = args.mu {
        cfg.schedule = MuSchedule::Fixed { mu: m };
    }
    if let Some(t) = args.iters {
        cfg.max_iters = t;
    }
    if let Some(b) = args.backbone {
        cfg.set("backbone", if b == BackboneArg::Cnn { "cnn" } else { "resnet_fpn" })?;
    }
    if let Some(p) = &args.weights_path {
        cfg.backbone.weights_path = Some(p.clone());
    }
    if args.silhouette {
        cfg.set("stop", "silhouette")?;
    }
    if let Some(k) = args.threshold {
        cfg.set("threshold", &k.to_string())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    preflight(&cfg)?;
    Ok(cfg)
}

/// Catches setup problems that would otherwise fail every image separately.
fn preflight(cfg: &RunConfig) -> Result<()> {
    if cfg.backbone.kind == crate::config::BackboneKind::ResnetFpn {
        match &cfg.backbone.weights_path {
            Some(p) if !p.is_file() => {
                return Err(Error::WeightsUnavailable(format!("{} not found", p.display())))
            }
            None if !cfg.backbone.random_init => {
                return Err(Error::WeightsUnavailable(
                    "the residual backbone needs --weights-path or backbone.random_init = true".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

fn dataset_name(data: &DataArgs) -> Result<Option<DatasetName>> {
    data.dataset.as_deref().map(str::parse).transpose()
}

/// Loads the manifest described by `data`, truncated to `--limit`.
pub fn manifest_from(data: &DataArgs) -> Result<DatasetManifest> {
    let name = dataset_name(data)?.ok_or_else(|| Error::Config("--dataset is required".into()))?;
    let root = match (&data.root, name) {
        (Some(r), _) => r.clone(),
        (None, DatasetName::Synthetic) => PathBuf::new(),
        (None, _) => return Err(Error::Config(format!("--root is required for {name}"))),
    };
    let split = data.split.clone().unwrap_or_else(|| name.default_split().to_string());
    let opts = ManifestOptions {
        id_list: data.ids.clone(),
        merge_table: data.merge_table.clone(),
        synthetic: (name == DatasetName::Synthetic).then(|| SyntheticSpec {
            blocks: data.blocks,
            size: data.size,
            noise: data.noise,
            count: data.count,
            seed: data.data_seed,
        }),
    };
    let mut manifest = load_manifest_with(name, &root, &split, &opts)?;
    if let Some(n) = data.limit {
        manifest.ids.truncate(n);
    }
    Ok(manifest)
}

/// Every item of the manifest; load failures are kept per id.
fn load_items(manifest: &DatasetManifest) -> Vec<(String, Result<(ImageTensor, GroundTruth)>)> {
    if let Some(spec) = manifest.synthetic_spec() {
        // one generator pass instead of regenerating the prefix per item
        let spec = SyntheticSpec {
            count: spec.count.min(manifest.len()),
            ..*spec
        };
        return match crate::datasets::synthetic_corpus(&spec) {
            Ok(corpus) => manifest.ids.iter().cloned().zip(corpus.into_iter().map(Ok)).collect(),
            Err(e) => vec![(String::from("synthetic"), Err(e))],
        };
    }
    manifest.ids.iter().map(|id| (id.clone(), manifest.load_item(id))).collect()
}

fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_kv_string())?;
    Ok(())
}

/// Label map, overlay and (optionally) log for one segmented image.
fn write_outputs(
    dir: &Path,
    image: &ImageTensor,
    labels: &LabelMap,
    records: Option<&[crate::types::IterationRecord]>,
) -> Result<()> {
    let id = image.source_id();
    write_label_map(labels, &dir.join(format!("{id}.labels.png")))?;
    let path = dir.join(format!("{id}.overlay.png"));
    overlay(image, labels, 0.6)?
        .save(&path)
        .map_err(|e| Error::decode(&path, e.to_string()))?;
    if let Some(r) = records {
        write_log(r, &dir.join(format!("{id}.log.jsonl")))?;
    }
    Ok(())
}

struct ImageOutcome {
    id: String,
    result: std::result::Result<(usize, String, usize, Option<usize>), String>,
}

fn print_outcomes(outcomes: &[ImageOutcome], out: &mut impl Write) -> std::io::Result<()> {
    for o in outcomes {
        match &o.result {
            Ok((iters, stop, q, thr)) => {
                let thr = thr.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
                writeln!(out, "{}: ok iters={iters} stop={stop} q'={q} threshold={thr}", o.id)?;
            }
            Err(e) => writeln!(out, "{}: FAILED {e}", o.id)?,
        }
    }
    Ok(())
}

fn write_segment_report(dir: &Path, outcomes: &[ImageOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("segment_report.csv")).map_err(csv_err)?;
    w.write_record(["id", "status", "iters", "stopped_by", "final_q", "threshold", "error"])
        .map_err(csv_err)?;
    for o in outcomes {
        let row: Vec<String> = match &o.result {
            Ok((iters, stop, q, thr)) => vec![
                o.id.clone(),
                "ok".into(),
                iters.to_string(),
                stop.clone(),
                q.to_string(),
                thr.map(|t| t.to_string()).unwrap_or_default(),
                String::new(),
            ],
            Err(e) => vec![o.id.clone(), "failed".into(), String::new(), String::new(), String::new(), String::new(), e.clone()],
        };
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn stop_name(s: Option<crate::types::StopReason>) -> String {
    match s {
        Some(crate::types::StopReason::Threshold) => "threshold".into(),
        Some(crate::types::StopReason::MaxIters) => "max_iters".into(),
        None => "-".into(),
    }
}

/// Segments `images` under `cfg`, writing into `dir`. Returns per-image outcomes
/// and the predicted maps of the successes.
fn segment_into(
    dir: &Path,
    images: Vec<(String, Result<ImageTensor>)>,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<(Vec<ImageOutcome>, Vec<(String, LabelMap)>)> {
    let mut outcomes = Vec::new();
    let mut ok_images = Vec::new();
    for (id, img) in images {
        match img {
            Ok(i) => ok_images.push(i),
            Err(e) => outcomes.push(ImageOutcome {
                id,
                result: Err(e.to_string()),
            }),
        }
    }
    let mut preds = Vec::new();
    if ok_images.is_empty() {
        return Ok((outcomes, preds));
    }
    write_config_echo(dir, cfg)?;
    if cfg.train_mode == TrainMode::Dataset {
        let resized: Vec<ImageTensor> = ok_images
            .iter()
            .map(|im| resize_shorter_side(im, None, cfg.resize_short).map(|r| r.0))
            .collect::<Result<_>>()?;
        let run = train_dataset(&resized, cfg)?;
        write_log(&run.state.records, &dir.join("dataset.log.jsonl"))?;
        for (im, labels) in resized.iter().zip(run.labels) {
            let result = write_outputs(dir, im, &labels, None)
                .map(|_| (run.state.iter, stop_name(run.state.stopped_by), labels.unique_count(), None))
                .map_err(|e| e.to_string());
            if result.is_ok() {
                preds.push((im.source_id().to_string(), labels));
            }
            outcomes.push(ImageOutcome {
                id: im.source_id().to_string(),
                result,
            });
        }
    } else {
        let results = segment_batch(&ok_images, cfg, jobs)?;
        for (im, r) in ok_images.iter().zip(results) {
            let result = r
                .and_then(|seg| {
                    write_outputs(dir, im, &seg.final_labels, Some(&seg.state.records))?;
                    let summary = (
                        seg.state.iter,
                        stop_name(seg.state.stopped_by),
                        seg.final_labels.unique_count(),
                        seg.threshold,
                    );
                    preds.push((im.source_id().to_string(), seg.final_labels));
                    Ok(summary)
                })
                .map_err(|e| e.to_string());
            outcomes.push(ImageOutcome {
                id: im.source_id().to_string(),
                result,
            });
        }
    }
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((outcomes, preds))
}

pub fn cmd_segment(args: &SegmentArgs) -> Result<i32> {
    let cfg = build_config(&args.run)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "# effective config\n{}", cfg.to_kv_string())?;
    let mut all = Vec::new();
    if !args.image.is_empty() {
        // group by output directory so each gets its own config echo and report
        let mut groups: Vec<(PathBuf, Vec<(String, Result<ImageTensor>)>)> = Vec::new();
        for path in &args.image {
            let dir = match &args.out {
                Some(o) => o.clone(),
                None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let item = (id, read_image(path));
            match groups.iter_mut().find(|(d, _)| *d == dir) {
                Some((_, items)) => items.push(item),
                None => groups.push((dir, vec![item])),
            }
        }
        for (dir, items) in groups {
            let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
            fs::create_dir_all(&dir)?;
            let (outcomes, _) = segment_into(&dir, items, &cfg, args.run.jobs)?;
            write_segment_report(&dir, &outcomes)?;
            all.extend(outcomes);
        }
    } else if args.data.dataset.is_some() {
        let manifest = manifest_from(&args.data)?;
        if manifest.is_empty() {
            return Err(Error::Config("the dataset selection is empty".into()));
        }
        let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("dynaseg_out"));
        fs::create_dir_all(&dir)?;
        let items = load_items(&manifest)
            .into_iter()
            .map(|(id, r)| (id, r.map(|(img, _)| img)))
            .collect();
        let (outcomes, _) = segment_into(&dir, items, &cfg, args.run.jobs)?;
        write_segment_report(&dir, &outcomes)?;
        all = outcomes;
    } else {
        return Err(Error::Config("give --image or --dataset".into()));
    }
    print_outcomes(&all, &mut stdout)?;
    let failed = all.iter().filter(|o| o.result.is_err()).count();
    if failed > 0 {
        writeln!(stdout, "{failed} of {} images failed", all.len())?;
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn find_prediction(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}.labels.png"), format!("{id}.png")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Scores predictions against ground truth under the dataset's protocol:
/// one dataset-wide matching for COCO-Stuff, per-image matching otherwise
/// (with the four annotation strategies for BSD500).
pub fn score_predictions(name: DatasetName, items: &[(String, LabelMap, GroundTruth)]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyEval);
    }
    let fit = |pred: &LabelMap, gt: &LabelMap| {
        let (h, w) = pred.dims();
        resize_labels(gt, h, w)
    };
    if name == DatasetName::CocoStuff {
        let mut cm = ConfusionMatrix::with_classes(0..coco::COARSE_CLASSES as u32);
        for (_, pred, gt) in items {
            cm.add(pred, &fit(pred, &gt.variants[0]), gt.ignore_label)?;
        }
        let mut report = eval::miou(&cm, &assign(&cm), Some(&coco::class_split()))?;
        report.num_images = items.len();
        return Ok(report);
    }
    let mut reports = Vec::with_capacity(items.len());
    for (_, pred, gt) in items {
        let variants: Vec<LabelMap> = gt.variants.iter().map(|v| fit(pred, v)).collect();
        let mut r = eval::evaluate(pred, &variants[0], gt.ignore_label)?;
        if name == DatasetName::Bsd500 {
            let bsd = bsd500_scores(pred, &variants, gt.ignore_label)?;
            r.miou_all = bsd.all;
            r.bsd = Some(bsd);
        }
        reports.push(r);
    }
    average_reports(&reports)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let manifest = manifest_from(&args.data)?;
    if !args.pred.is_dir() {
        return Err(Error::Config(format!("prediction directory {} not found", args.pred.display())));
    }
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for (id, item) in load_items(&manifest) {
        let (_, gt) = item?;
        match find_prediction(&args.pred, &id) {
            Some(p) => items.push((id, read_label_map(&p)?, gt)),
            None => missing.push(id),
        }
    }
    let mut stdout = std::io::stdout().lock();
    let mut report = match score_predictions(manifest.name, &items) {
        Ok(r) => r,
        Err(Error::EmptyEval) => EvalReport {
            miou_all: 0.0,
            miou_things: None,
            miou_stuff: None,
            pixel_acc: 0.0,
            per_class: Vec::new(),
            assignment: None,
            bsd: None,
            num_images: 0,
            missing: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    report.missing = missing;
    let out = args.out.clone().unwrap_or_else(|| args.pred.clone());
    fs::create_dir_all(&out)?;
    report.write_json(&out.join("report.json"))?;
    report.write_class_csv(&out.join("classes.csv"))?;
    report.summary(&mut stdout)?;
    if !report.missing.is_empty() {
        writeln!(stdout, "missing predictions: {}", report.missing.join(", "))?;
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

pub const SWEEP_HEADER: [&str; 9] = [
    "param",
    "value",
    "schedule",
    "images",
    "miou",
    "pixel_acc",
    "bsd_mean",
    "mean_iters",
    "mean_final_q",
];

/// Grid points already present in a sweep CSV.
fn completed_points(path: &Path, param: &str) -> Result<BTreeSet<u64>> {
    let mut done = BTreeSet::new();
    if !path.is_file() {
        return Ok(done);
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.get(0) == Some(param) {
            if let Some(v) = row.get(1).and_then(|v| v.parse::<f64>().ok()) {
                done.insert(v.to_bits());
            }
        }
    }
    Ok(done)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    if args.values.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let base = build_config(&args.run)?;
    let param = match args.param {
        SweepParam::Alpha => "alpha",
        SweepParam::Mu => "mu",
    };
    let manifest = manifest_from(&args.data)?;
    let items: Vec<(String, ImageTensor, GroundTruth)> = load_items(&manifest)
        .into_iter()
        .map(|(id, r)| r.map(|(img, gt)| (id, img, gt)))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config("the dataset selection is empty".into()));
    }
    let done = completed_points(&args.out, param)?;
    let fresh = !args.out.is_file();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = fs::OpenOptions::new().create(true).append(true).open(&args.out)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(SWEEP_HEADER).map_err(csv_err)?;
        w.flush()?;
    }
    let mut stdout = std::io::stdout().lock();
    let mut failures = 0;
    for &value in &args.values {
        if done.contains(&value.to_bits()) {
            writeln!(stdout, "{param}={value}: already in {}, skipped", args.out.display())?;
            continue;
        }
        let mut cfg = base.clone();
        cfg.set(param, &value.to_string())?;
        cfg.validate()?;
        let images: Vec<ImageTensor> = items.iter().map(|(_, im, _)| im.clone()).collect();
        let (preds, iters, final_q) = if cfg.train_mode == TrainMode::Dataset {
            let resized: Vec<ImageTensor> = images
                .iter()
                .map(|im| resize_shorter_side(im, None, cfg.resize_short).map(|r| r.0))
                .collect::<Result<_>>()?;
            let run = train_dataset(&resized, &cfg)?;
            let q = run.labels.iter().map(|l| l.unique_count() as f64).sum::<f64>() / run.labels.len() as f64;
            (run.labels.into_iter().map(Ok).collect::<Vec<_>>(), run.state.iter as f64, q)
        } else {
            let results = segment_batch(&images, &cfg, args.run.jobs)?;
            let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
            let n = ok.len().max(1) as f64;
            let iters = ok.iter().map(|s| s.state.iter as f64).sum::<f64>() / n;
            let q = ok.iter().map(|s| s.final_labels.unique_count() as f64).sum::<f64>() / n;
            (results.into_iter().map(|r| r.map(|s| s.final_labels)).collect(), iters, q)
        };
        let mut scored = Vec::new();
        let mut failed = 0;
        for ((id, _, gt), pred) in items.iter().zip(preds) {
            match pred {
                Ok(p) => scored.push((id.clone(), p, gt.clone())),
                Err(e) => {
                    failed += 1;
                    writeln!(stdout, "{param}={value}: {id} FAILED {e}")?;
                }
            }
        }
        if failed > 0 {
            failures += 1;
            continue;
        }
        let report = score_predictions(manifest.name, &scored)?;
        let row = [
            param.to_string(),
            value.to_string(),
            cfg.schedule.name().to_string(),
            scored.len().to_string(),
            format!("{:.6}", report.miou_all),
            format!("{:.6}", report.pixel_acc),
            report.bsd.map(|b| format!("{:.6}", b.mean)).unwrap_or_default(),
            format!("{iters:.2}"),
            format!("{final_q:.2}"),
        ];
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        writeln!(stdout, "{param}={value}: miou={:.4} pacc={:.4}", report.miou_all, report.pixel_acc)?;
    }
    Ok(if failures > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

pub fn cmd_doctor(args: &DoctorArgs) -> Result<i32> {
    let name = dataset_name(&args.data)?.ok_or_else(|| Error::Config("--dataset is required".into()))?;
    let root = args.data.root.clone().unwrap_or_default();
    let split = args.data.split.clone().unwrap_or_else(|| name.default_split().to_string());
    let opts = ManifestOptions {
        id_list: args.data.ids.clone(),
        merge_table: args.data.merge_table.clone(),
        synthetic: None,
    };
    let report = doctor(name, &root, &split, &opts)?;
    let mut stdout = std::io::stdout().lock();
    let expected = report.expected.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
    writeln!(stdout, "{}: {} items (published split size {expected})", report.name, report.items)?;
    for p in &report.problems {
        writeln!(stdout, "  {p}")?;
    }
    if report.ok() {
        writeln!(stdout, "layout ok")?;
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_CONFIG)
    }
}

//! COCO-Stuff 27-class run (not part of CI): one residual + pyramid model
//! trained over the curated split, scored with a single dataset-wide
//! matching and reported as All / Things / Stuff mIoU and pixel accuracy.
//!
//! cargo run --release --example extended_coco -- /data/cocostuff resnet18.safetensors [fsf|scf] [epochs]

use dynaseg::cli::score_predictions;
use dynaseg::config::{BackboneKind, MuSchedule, TrainMode};
use dynaseg::datasets::{load_manifest, resize_shorter_side, DatasetName};
use dynaseg::trainer::train_dataset;
use dynaseg::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let (Some(root), Some(weights)) = (args.next(), args.next()) else {
        eprintln!("usage: extended_coco <COCO-Stuff root> <resnet18 safetensors> [fsf|scf] [epochs]");
        std::process::exit(2);
    };
    let mut cfg = RunConfig::default();
    cfg.schedule = MuSchedule::from_name(&args.next().unwrap_or_else(|| "scf".into()))?;
    cfg.max_iters = args.next().map(|e| e.parse()).transpose()?.unwrap_or(10);
    cfg.backbone.kind = BackboneKind::ResnetFpn;
    cfg.backbone.weights_path = Some(weights.into());
    cfg.train_mode = TrainMode::Dataset;

    let manifest = load_manifest(DatasetName::CocoStuff, root.as_ref(), "val2017")?;
    let mut images = Vec::new();
    let mut gts = Vec::new();
    for id in &manifest.ids {
        let (img, gt) = manifest.load_item(id)?;
        let (img, label) = resize_shorter_side(&img, Some(&gt.variants[0]), cfg.resize_short)?;
        images.push(img);
        gts.push(dynaseg::datasets::GroundTruth::single(label.expect("resized labels"), gt.ignore_label));
    }
    println!("{} images, {} epochs", images.len(), cfg.max_iters);
    let run = train_dataset(&images, &cfg)?;
    let items: Vec<_> = manifest.ids.iter().cloned().zip(run.labels).zip(gts).map(|((id, l), g)| (id, l, g)).collect();
    let report = score_predictions(DatasetName::CocoStuff, &items)?;
    report.summary(std::io::stdout())?;
    Ok(())
}

//! PASCAL VOC 2012 run (not part of CI): per-image SCF segmentation scored
//! per image against the object masks.
//!
//! cargo run --release --example extended_voc2012 -- /data/VOCdevkit [limit] [jobs]

use dynaseg::cli::score_predictions;
use dynaseg::config::MuSchedule;
use dynaseg::datasets::{load_manifest, DatasetName};
use dynaseg::trainer::segment_batch;
use dynaseg::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(root) = args.next() else {
        eprintln!("usage: extended_voc2012 <VOC root> [limit] [jobs]");
        std::process::exit(2);
    };
    let limit: Option<usize> = args.next().map(|l| l.parse()).transpose()?;
    let jobs: usize = args.next().map(|j| j.parse()).transpose()?.unwrap_or(1);
    let mut manifest = load_manifest(DatasetName::Voc2012, root.as_ref(), "trainval")?;
    if let Some(n) = limit {
        manifest.ids.truncate(n);
    }
    let mut cfg = RunConfig::default();
    cfg.schedule = MuSchedule::scf();
    cfg.max_iters = 1000;

    let mut items = Vec::new();
    for chunk in manifest.ids.chunks(jobs.max(1) * 4) {
        let loaded = chunk.iter().map(|id| manifest.load_item(id)).collect::<Result<Vec<_>, _>>()?;
        let images: Vec<_> = loaded.iter().map(|(i, _)| i.clone()).collect();
        for ((img, gt), r) in loaded.into_iter().zip(segment_batch(&images, &cfg, jobs)?) {
            items.push((img.source_id().to_string(), r?.final_labels, gt));
        }
    }
    let report = score_predictions(DatasetName::Voc2012, &items)?;
    report.summary(std::io::stdout())?;
    Ok(())
}

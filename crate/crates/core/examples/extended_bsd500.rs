//! Full BSD500 test-split run (not part of CI): per-image FSF segmentation
//! scored with the All / Fine / Coarse / Mean annotation strategies.
//!
//! cargo run --release --example extended_bsd500 -- /data/BSR [schedule] [jobs]

use dynaseg::cli::score_predictions;
use dynaseg::config::MuSchedule;
use dynaseg::datasets::{load_manifest, DatasetName};
use dynaseg::trainer::segment_batch;
use dynaseg::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(root) = args.next() else {
        eprintln!("usage: extended_bsd500 <BSDS500 root> [fsf|scf] [jobs]");
        std::process::exit(2);
    };
    let schedule = MuSchedule::from_name(&args.next().unwrap_or_else(|| "fsf".into()))?;
    let jobs: usize = args.next().map(|j| j.parse()).transpose()?.unwrap_or(1);
    let manifest = load_manifest(DatasetName::Bsd500, root.as_ref(), "test")?;
    let mut cfg = RunConfig::default();
    cfg.schedule = schedule;
    cfg.max_iters = 1000;

    let mut items = Vec::new();
    for chunk in manifest.ids.chunks(jobs.max(1) * 4) {
        let loaded = chunk.iter().map(|id| manifest.load_item(id)).collect::<Result<Vec<_>, _>>()?;
        let images: Vec<_> = loaded.iter().map(|(i, _)| i.clone()).collect();
        for ((img, gt), r) in loaded.into_iter().zip(segment_batch(&images, &cfg, jobs)?) {
            let r = r?;
            println!("{} q'={} iters={}", img.source_id(), r.final_labels.unique_count(), r.state.iter);
            items.push((img.source_id().to_string(), r.final_labels, gt));
        }
    }
    let report = score_predictions(DatasetName::Bsd500, &items)?;
    report.summary(std::io::stdout())?;
    Ok(())
}

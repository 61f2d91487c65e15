//! FSF alpha grid on a synthetic corpus; prints per-alpha mIoU and the best alpha.
//!
//! cargo run --release --example alpha_sweep -- [fsf|scf]

use dynaseg::cli::score_predictions;
use dynaseg::config::MuSchedule;
use dynaseg::datasets::{synthetic_corpus, DatasetName, SyntheticSpec};
use dynaseg::trainer::segment_batch;
use dynaseg::RunConfig;

const GRID: [f64; 8] = [25.0, 45.0, 50.0, 55.0, 60.0, 75.0, 100.0, 200.0];

fn main() -> dynaseg::Result<()> {
    let schedule = std::env::args().nth(1).unwrap_or_else(|| "fsf".into());
    let base = MuSchedule::from_name(&schedule)?;
    let spec = SyntheticSpec { blocks: 4, size: 32, noise: 0.03, count: 3, seed: 2 };
    let corpus = synthetic_corpus(&spec)?;
    let images: Vec<_> = corpus.iter().map(|(i, _)| i.clone()).collect();

    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for alpha in GRID {
        let mut cfg = RunConfig::default();
        cfg.schedule = base.with_parameter(alpha);
        cfg.max_iters = 32;
        let results = segment_batch(&images, &cfg, 1)?;
        let mut items = Vec::new();
        for ((img, gt), r) in corpus.iter().zip(results) {
            items.push((img.source_id().to_string(), r?.final_labels, gt.clone()));
        }
        let report = score_predictions(DatasetName::Synthetic, &items)?;
        println!("{schedule} alpha {alpha:>5}: mIoU {:.4}", report.miou_all);
        if report.miou_all > best.1 {
            best = (alpha, report.miou_all);
        }
    }
    println!("best alpha {} (mIoU {:.4})", best.0, best.1);
    Ok(())
}

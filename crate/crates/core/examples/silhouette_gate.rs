//! The silhouette gate on noiseless synthetic images with 2 to 5 regions.

use dynaseg::backbones::Segmenter;
use dynaseg::datasets::{synthetic_corpus, SyntheticSpec};
use dynaseg::silhouette::select_opt_nc;
use dynaseg::{argmax_labels, normalize_response, seed_all, RunConfig};

fn main() -> dynaseg::Result<()> {
    let cfg = RunConfig::default();
    for blocks in 2..=5 {
        let spec = SyntheticSpec { blocks, count: 1, seed: blocks as u64, ..Default::default() };
        let (image, _) = synthetic_corpus(&spec)?.remove(0);
        let model = Segmenter::from_config(&cfg, seed_all(cfg.seed))?;
        let first = normalize_response(&model.forward(&image)?);
        let q0 = argmax_labels(&first).unique_count();
        let ks: Vec<usize> = cfg.silhouette.candidates().into_iter().filter(|&k| k <= q0).collect();
        let r = select_opt_nc(&image, &first, &ks, &cfg.silhouette, seed_all(cfg.seed))?;
        let top: Vec<String> = r
            .candidate_ks
            .iter()
            .zip(&r.scores)
            .take(5)
            .map(|(k, s)| format!("k={k}:{}", s.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())))
            .collect();
        println!("{blocks} regions: q'0 = {q0}, opt_nC = {}  [{}]", r.opt_nc, top.join(" "));
    }
    Ok(())
}

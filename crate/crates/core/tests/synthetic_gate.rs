use dynaseg::backbones::Segmenter;
use dynaseg::datasets::{synthetic_corpus, SyntheticSpec};
use dynaseg::silhouette::select_opt_nc;
use dynaseg::{argmax_labels, normalize_response, seed_all, RunConfig};

#[test]
fn gate_recovers_block_count_on_noiseless_images() {
    let cfg = RunConfig::default();
    for blocks in 2..=5 {
        let spec = SyntheticSpec {
            blocks,
            count: 1,
            seed: 100 + blocks as u64,
            ..Default::default()
        };
        let (image, _) = synthetic_corpus(&spec).unwrap().remove(0);
        let model = Segmenter::from_config(&cfg, seed_all(blocks as u64)).unwrap();
        let first = normalize_response(&model.forward(&image).unwrap());
        let q0 = argmax_labels(&first).unique_count();
        let ks: Vec<usize> = cfg.silhouette.candidates().into_iter().filter(|&k| k <= q0).collect();
        let r = select_opt_nc(&image, &first, &ks, &cfg.silhouette, seed_all(blocks as u64)).unwrap();
        assert_eq!(r.opt_nc, blocks, "scores {:?}", r.scores);
    }
}

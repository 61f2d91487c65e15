//! Trainable parameter counts of the two backbones.

use dynaseg::backbones::{expected_param_count, Segmenter};
use dynaseg::config::BackboneKind;
use dynaseg::{seed_all, RunConfig};

fn main() -> dynaseg::Result<()> {
    let cnn = RunConfig::default();
    let mut res = RunConfig::default();
    res.backbone.kind = BackboneKind::ResnetFpn;
    res.backbone.random_init = true;
    for (name, cfg) in [("cnn", &cnn), ("resnet18 + fpn", &res)] {
        let built = Segmenter::from_config(cfg, seed_all(0))?.num_params();
        println!("{name:>15}: {built} (closed form {})", expected_param_count(cfg));
    }
    Ok(())
}

//! One image segmented under fixed mu in {1, 5, 50, 100}; writes a colour
//! rendering per mu for side-by-side comparison.

use std::path::PathBuf;

use dynaseg::config::{MuSchedule, StopMode};
use dynaseg::datasets::{synthetic_corpus, SyntheticSpec};
use dynaseg::label_io::{colorize, read_image};
use dynaseg::trainer::segment_image;
use dynaseg::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let image = match std::env::args().nth(1) {
        Some(p) => read_image(p.as_ref())?,
        None => synthetic_corpus(&SyntheticSpec { blocks: 5, count: 1, noise: 0.05, ..Default::default() })?.remove(0).0,
    };
    let out = PathBuf::from("mu_variation_out");
    std::fs::create_dir_all(&out)?;
    for mu in [1.0, 5.0, 50.0, 100.0] {
        let mut cfg = RunConfig::default();
        cfg.schedule = MuSchedule::Fixed { mu };
        cfg.stop = StopMode::Threshold { k: 2 };
        cfg.max_iters = 100;
        let r = segment_image(&image, &cfg)?;
        colorize(&r.final_labels).save(out.join(format!("mu_{mu}.png")))?;
        println!("mu {mu:>5}: {} segments after {} iterations", r.final_labels.unique_count(), r.state.iter);
    }
    println!("wrote {}", out.display());
    Ok(())
}

//! Segments one image and writes its label map and overlay.
//!
//! cargo run --release --example segment_image -- photo.jpg out/
//! Without arguments a synthetic 4-region image is used.

use std::path::PathBuf;

use dynaseg::datasets::{synthetic_corpus, SyntheticSpec};
use dynaseg::label_io::{overlay, read_image, write_label_map};
use dynaseg::trainer::segment_image;
use dynaseg::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let image = match args.next() {
        Some(path) => read_image(path.as_ref())?,
        None => {
            let spec = SyntheticSpec { blocks: 4, count: 1, noise: 0.03, ..Default::default() };
            synthetic_corpus(&spec)?.remove(0).0
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "segment_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = RunConfig::default();
    let result = segment_image(&image, &cfg)?;
    println!(
        "{}: {} iterations, stopped by {:?}, q' {} -> {}, floor {:?}, {:.1}s",
        result.source_id,
        result.state.iter,
        result.state.stopped_by,
        result.state.q_history[0],
        result.final_labels.unique_count(),
        result.threshold,
        result.wall_time_secs
    );
    let id = image.source_id();
    write_label_map(&result.final_labels, &out.join(format!("{id}.labels.png")))?;
    overlay(&image, &result.final_labels, 0.6)?.save(out.join(format!("{id}.overlay.png")))?;
    println!("wrote {}", out.display());
    Ok(())
}

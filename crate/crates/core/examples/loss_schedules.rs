//! How the FSF and SCF schedules move the balancing weight as clusters merge,
//! and the loss parts on a random response map.

use dynaseg::config::{MuSchedule, Reduction};
use dynaseg::loss::{combined_loss, compute_mu};
use dynaseg::{argmax_labels, ResponseMap};
use ndarray::Array3;
use rand::{Rng, SeedableRng};

fn main() -> dynaseg::Result<()> {
    let schedules = [MuSchedule::fsf(), MuSchedule::scf(), MuSchedule::Fixed { mu: 5.0 }];
    println!("{:>4} {:>10} {:>10} {:>10}", "q'", "fsf", "scf", "fixed");
    for q in [100, 64, 32, 16, 8, 4, 2, 1] {
        let mu: Vec<f64> = schedules.iter().map(|s| compute_mu(s, q)).collect::<Result<_, _>>()?;
        println!("{q:>4} {:>10.4} {:>10.4} {:>10.4}", mu[0], mu[1], mu[2]);
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let resp = ResponseMap::raw(Array3::from_shape_fn((16, 16, 8), |_| rng.random_range(-1.0..1.0)));
    let labels = argmax_labels(&resp);
    let q = labels.unique_count();
    println!("\nrandom 16x16x8 map, q' = {q}");
    for s in schedules {
        let parts = combined_loss(&resp, &labels, &s, q, Reduction::Mean)?;
        println!(
            "{:>5}: sim {:.4} + mu {:.4} * con {:.4} = {:.4}",
            s.name(),
            parts.sim,
            parts.mu,
            parts.con,
            parts.total
        );
    }
    Ok(())
}

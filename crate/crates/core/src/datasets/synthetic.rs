//! Seeded piecewise-constant colour images with exact ground truth.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::types::{seed_all, ImageTensor, LabelMap, Stream};

/// Well separated base colours; blocks draw distinct entries.
const COLORS: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.20, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blocks: usize,
    /// Images are `size x size`.
    pub size: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f32,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            blocks: 3,
            size: 64,
            noise: 0.0,
            count: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=COLORS.len()).contains(&self.blocks) {
            return Err(Error::Config(format!("blocks must be in 1..={}", COLORS.len())));
        }
        if self.size < 8 {
            return Err(Error::Config("synthetic images must be at least 8x8".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite non-negative value".into()));
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        (0..self.count).map(|i| format!("synthetic_{i:04}")).collect()
    }
}

/// Voronoi partition of a `size x size` grid into `blocks` regions, each
/// covering at least a fair share / 3 of the pixels.
fn partition(size: usize, blocks: usize, rng: &mut impl Rng) -> Array2<u32> {
    let min_share = size * size / (3 * blocks);
    loop {
        let centers: Vec<(f32, f32)> = (0..blocks)
            .map(|_| (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32)))
            .collect();
        let labels = Array2::from_shape_fn((size, size), |(y, x)| {
            let d = |c: &(f32, f32)| (c.0 - y as f32 + 0.5).powi(2) + (c.1 - x as f32 + 0.5).powi(2);
            let mut best = 0;
            for (i, c) in centers.iter().enumerate() {
                if d(c) < d(&centers[best]) {
                    best = i;
                }
            }
            best as u32
        });
        let mut counts = vec![0usize; blocks];
        labels.iter().for_each(|&l| counts[l as usize] += 1);
        if counts.iter().all(|&c| c >= min_share) {
            return labels;
        }
    }
}

/// Generates `spec.count` images; the same spec always yields the same corpus.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<(ImageTensor, GroundTruth)>> {
    spec.validate()?;
    let mut rng = seed_all(spec.seed).rng(Stream::Synthetic);
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid normal");
    let mut out = Vec::with_capacity(spec.count);
    for id in spec.ids() {
        let labels = partition(spec.size, spec.blocks, &mut rng);
        let mut palette: Vec<usize> = (0..COLORS.len()).collect();
        palette.shuffle(&mut rng);
        let px = Array3::from_shape_fn((spec.size, spec.size, 3), |(y, x, c)| COLORS[palette[labels[[y, x]] as usize]][c]);
        let px = if spec.noise > 0.0 {
            px.mapv(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
        } else {
            px
        };
        let image = ImageTensor::new(px, id)?;
        out.push((image, GroundTruth::single(LabelMap::new(labels), None)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_has_block_count_classes() {
        let spec = SyntheticSpec {
            blocks: 3,
            size: 64,
            noise: 0.02,
            count: 4,
            seed: 1,
        };
        for (img, gt) in synthetic_corpus(&spec).unwrap() {
            assert_eq!(gt.variants[0].unique_count(), 3);
            assert_eq!((img.height(), img.width()), (64, 64));
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        let a = synthetic_corpus(&spec).unwrap();
        let b = synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let c = synthetic_corpus(&SyntheticSpec { seed: 9, ..spec }).unwrap();
        assert_ne!(a[0].0, c[0].0);
    }

    #[test]
    fn noiseless_images_are_piecewise_constant() {
        let spec = SyntheticSpec {
            blocks: 4,
            count: 1,
            ..Default::default()
        };
        let (img, gt) = &synthetic_corpus(&spec).unwrap()[0];
        let mut colour_of = std::collections::HashMap::new();
        for ((y, x), &l) in gt.variants[0].labels().indexed_iter() {
            let c: Vec<u32> = (0..3).map(|k| (img.pixels()[[y, x, k]] * 1000.0) as u32).collect();
            assert_eq!(colour_of.entry(l).or_insert_with(|| c.clone()), &c);
        }
        assert_eq!(colour_of.len(), 4);
    }
}

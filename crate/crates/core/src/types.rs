//! Shared domain types: images, feature/response maps, label maps, the
//! per-image training record and the seeding contract.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with values scaled to `[0, 1]`, stored `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
    source_id: String,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f32>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::InvalidImage(format!(
                "image must be at least 2x2, got {h}x{w}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn from_rgb8(img: &image::RgbImage, source_id: impl Into<String>) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(pixels, source_id)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// `(1, 3, H, W)` tensor in NCHW layout.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let (h, w, _) = self.pixels.dim();
        let chw = self.pixels.view().permuted_axes([2, 0, 1]);
        let data: Vec<f32> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, 3, h, w), device)?)
    }
}

/// Dense per-pixel features, `H x W x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.dim().2 < 1 {
            return Err(Error::ShapeMismatch("feature dimension must be >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite feature value".into()));
        }
        Ok(Self { values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(nchw_to_hwc(t)?)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }
}

/// Per-pixel classifier responses, `H x W x q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    values: Array3<f64>,
    normalized: bool,
}

impl ResponseMap {
    /// Raw (unnormalized) responses.
    pub fn raw(values: Array3<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Wraps values that are already standardized per channel.
    pub fn normalized(values: Array3<f64>) -> Self {
        Self {
            values,
            normalized: true,
        }
    }

    /// Reads a `(1, q, H, W)` or `(q, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, normalized: bool) -> Result<Self> {
        Ok(Self {
            values: nchw_to_hwc(t)?,
            normalized,
        })
    }

    /// `(1, q, H, W)` tensor of the given dtype.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (h, w, q) = self.values.dim();
        let data: Vec<f64> = self
            .values
            .view()
            .permuted_axes([2, 0, 1])
            .iter()
            .copied()
            .collect();
        Ok(Tensor::from_vec(data, (1, q, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Flattens to an `(H*W) x q` matrix, row-major over pixels.
    pub fn pixel_rows(&self) -> Array2<f64> {
        let (h, w, q) = self.values.dim();
        self.values
            .to_shape((h * w, q))
            .map(|v| v.to_owned())
            .unwrap_or_else(|_| {
                Array2::from_shape_fn((h * w, q), |(i, c)| self.values[[i / w, i % w, c]])
            })
    }
}

fn nchw_to_hwc(t: &Tensor) -> Result<Array3<f64>> {
    let t = match t.rank() {
        4 => {
            if t.dim(0)? != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "expected batch of one, got {:?}",
                    t.dims()
                )));
            }
            t.squeeze(0)?
        }
        3 => t.clone(),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "expected (1, C, H, W), got {:?}",
                t.dims()
            )))
        }
    };
    let (c, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let chw = Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
}

/// Per-pixel integer labels plus the number of distinct labels present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array2<u32>,
    unique_count: usize,
}

impl LabelMap {
    pub fn new(labels: Array2<u32>) -> Self {
        let unique_count = labels.iter().collect::<BTreeSet<_>>().len();
        Self {
            labels,
            unique_count,
        }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let arr = Array2::from_shape_vec((height, width), labels)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self::new(arr))
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    /// Number of distinct labels present (q').
    pub fn unique_count(&self) -> usize {
        self.unique_count
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Sorted distinct labels, skipping `ignore` when given.
    pub fn distinct(&self, ignore: Option<u32>) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| Some(l) != ignore)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Relabels to `0..n` in order of first appearance of each sorted label.
    pub fn densified(&self, ignore: Option<u32>) -> (LabelMap, usize) {
        let distinct = self.distinct(ignore);
        let labels = self.labels.mapv(|l| {
            if Some(l) == ignore {
                l
            } else {
                distinct.binary_search(&l).unwrap() as u32
            }
        });
        (LabelMap::new(labels), distinct.len())
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Standardizes every channel to zero mean and unit (population) variance
/// over all spatial positions. Zero-variance channels become all zeros.
pub fn normalize_response(raw: &ResponseMap) -> ResponseMap {
    let mut values = raw.values.clone();
    let n = (values.dim().0 * values.dim().1) as f64;
    for mut channel in values.axis_iter_mut(Axis(2)) {
        let mean = channel.sum() / n;
        let var = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            let sd = var.sqrt();
            channel.mapv_inplace(|v| (v - mean) / sd);
        } else {
            channel.fill(0.0);
        }
    }
    ResponseMap::normalized(values)
}

/// Index of the largest response per pixel; ties go to the lowest channel.
pub fn argmax_labels(resp: &ResponseMap) -> LabelMap {
    let (h, w, _) = resp.values.dim();
    let labels = Array2::from_shape_fn((h, w), |(i, j)| {
        argmax_lowest(resp.values.slice(ndarray::s![i, j, ..]).iter().copied()) as u32
    });
    LabelMap::new(labels)
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Deterministic random streams derived from one seed.
///
/// Each stochastic component draws from its own stream so that adding a
/// draw in one place never shifts the numbers another component sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    WeightInit = 1,
    PixelSampling = 2,
    KMeans = 3,
    Synthetic = 4,
}

impl SeedStreams {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }
}

/// Fixes every stochastic component (weight init, pixel sampling, k-means
/// restarts, synthetic data) to streams derived from `seed`.
pub fn seed_all(seed: u64) -> SeedStreams {
    SeedStreams { seed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Threshold,
}

/// Loss parts of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub con: f64,
    pub mu: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(sim: f64, con: f64, mu: f64) -> Self {
        Self {
            sim,
            con,
            mu,
            total: sim + mu * con,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sim.is_finite() && self.con.is_finite() && self.mu.is_finite() && self.total.is_finite()
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mu: f64,
    pub loss_sim: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub q_prime: usize,
}

/// Optimization record for one image (or one dataset-wide run).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iter: usize,
    pub mu: f64,
    pub loss_sim: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub q_history: Vec<usize>,
    pub records: Vec<IterationRecord>,
    pub stopped_by: Option<StopReason>,
}

impl TrainState {
    pub(crate) fn push(&mut self, q_prime: usize, loss: LossBreakdown) {
        let record = IterationRecord {
            iter: self.iter,
            mu: loss.mu,
            loss_sim: loss.sim,
            loss_con: loss.con,
            loss_total: loss.total,
            q_prime,
        };
        self.records.push(record);
        self.q_history.push(q_prime);
        self.mu = loss.mu;
        self.loss_sim = loss.sim;
        self.loss_con = loss.con;
        self.loss_total = loss.total;
        self.iter += 1;
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss_total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss_total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn channel_moments(map: &ResponseMap) -> Vec<(f64, f64)> {
        let n = (map.height() * map.width()) as f64;
        map.values()
            .axis_iter(Axis(2))
            .map(|c| {
                let m = c.sum() / n;
                let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn two_point_standardization() {
        let raw = ResponseMap::raw(Array3::from_shape_vec((1, 2, 1), vec![1.0, 3.0]).unwrap());
        let n = normalize_response(&raw);
        assert!(n.is_normalized());
        assert_eq!(n.values().iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let raw = ResponseMap::raw(Array3::from_elem((1, 3, 1), 5.0));
        let n = normalize_response(&raw);
        assert!(n.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_map_has_unit_moments() {
        let mut rng = seed_all(7).rng(Stream::Synthetic);
        let raw = ResponseMap::raw(Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(-3.0..5.0)));
        let n = normalize_response(&raw);
        for (m, v) in channel_moments(&n) {
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn argmax_examples() {
        let r = ResponseMap::normalized(Array3::from_shape_vec((1, 1, 3), vec![0.2, -1.0, 3.1]).unwrap());
        assert_eq!(argmax_labels(&r).labels()[[0, 0]], 2);

        let r = ResponseMap::normalized(Array3::from_elem((3, 3, 4), 0.5));
        let l = argmax_labels(&r);
        assert_eq!(l.unique_count(), 1);
        assert_eq!(l.labels()[[1, 1]], 0);

        let mut v = Array3::zeros((2, 2, 4));
        for (k, ch) in [0, 0, 1, 2].into_iter().enumerate() {
            v[[k / 2, k % 2, ch]] = 1.0;
        }
        assert_eq!(argmax_labels(&ResponseMap::normalized(v)).unique_count(), 3);
    }

    #[test]
    fn label_map_densify() {
        let l = LabelMap::new(array![[7, 3], [255, 7]]);
        assert_eq!(l.unique_count(), 3);
        let (d, n) = l.densified(Some(255));
        assert_eq!(n, 2);
        assert_eq!(d.labels(), &array![[1, 0], [255, 1]]);
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(Array3::zeros((1, 4, 3)), "x").is_err());
        assert!(ImageTensor::new(Array3::zeros((4, 4, 1)), "x").is_err());
        assert!(ImageTensor::new(Array3::from_elem((4, 4, 3), 1.5), "x").is_err());
        let img = ImageTensor::new(Array3::from_elem((4, 5, 3), 0.25), "x").unwrap();
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 5]);
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = seed_all(1).rng(Stream::Synthetic);
        let v = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-1.0..1.0));
        let r = ResponseMap::raw(v.clone());
        let t = r.to_tensor(&Device::Cpu, DType::F64).unwrap();
        assert_eq!(t.dims(), &[1, 5, 3, 4]);
        let back = ResponseMap::from_tensor(&t, false).unwrap();
        assert_eq!(back.values(), &v);
    }

    #[test]
    fn seed_streams_are_independent_and_repeatable() {
        let a: u64 = seed_all(3).rng(Stream::WeightInit).random();
        let b: u64 = seed_all(3).rng(Stream::WeightInit).random();
        let c: u64 = seed_all(3).rng(Stream::KMeans).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(data in prop::collection::vec(-10.0f64..10.0, 5 * 4 * 3)) {
            let raw = ResponseMap::raw(Array3::from_shape_vec((5, 4, 3), data).unwrap());
            let once = normalize_response(&raw);
            let twice = normalize_response(&once);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn argmax_invariant_under_uniform_shift(
            data in prop::collection::vec(-5.0f64..5.0, 3 * 3 * 4),
            shifts in prop::collection::vec(-100.0f64..100.0, 9),
        ) {
            let base = Array3::from_shape_vec((3, 3, 4), data).unwrap();
            let mut shifted = base.clone();
            for i in 0..3 {
                for j in 0..3 {
                    shifted.slice_mut(ndarray::s![i, j, ..]).mapv_inplace(|v| v + shifts[i * 3 + j]);
                }
            }
            let a = argmax_labels(&ResponseMap::normalized(base));
            let b = argmax_labels(&ResponseMap::normalized(shifted));
            prop_assert_eq!(a.labels(), b.labels());
        }

        #[test]
        fn unique_count_bounded_by_channels(data in prop::collection::vec(-5.0f64..5.0, 4 * 4 * 6)) {
            let r = ResponseMap::normalized(Array3::from_shape_vec((4, 4, 6), data).unwrap());
            let l = argmax_labels(&r);
            prop_assert!(l.unique_count() >= 1 && l.unique_count() <= 6);
            prop_assert_eq!(l.unique_count(), l.distinct(None).len());
        }
    }
}

//! The per-image self-training loop and its dataset-wide variant.
//!
//! Every iteration: forward, batch-normalize the responses, take the argmax
//! labels as targets, weight the two losses by the schedule's μ for the
//! current cluster count q', and take one SGD step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rayon::prelude::*;

use crate::backbones::Segmenter;
use crate::config::{RunConfig, StopMode, TrainMode};
use crate::error::{Error, Result};
use crate::loss;
use crate::silhouette::{select_opt_nc, should_stop, SilhouetteResult, StopDecision};
use crate::types::{argmax_labels, seed_all, ImageTensor, IterationRecord, LabelMap, ResponseMap, StopReason, TrainState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    spec: OptimizerSpec,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, spec: OptimizerSpec) -> Self {
        let velocity = vec![None; vars.len()];
        Self { vars, velocity, spec }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.spec.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.spec.weight_decay)?)?;
            }
            let step = match vel.take() {
                Some(v) if self.spec.momentum != 0.0 => ((v * self.spec.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&step * self.spec.lr)?)?)?;
            *vel = Some(step);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub source_id: String,
    pub final_labels: LabelMap,
    pub state: TrainState,
    pub silhouette: Option<SilhouetteResult>,
    /// q' floor used by the stopping rule.
    pub threshold: Option<usize>,
    pub wall_time_secs: f64,
}

/// Forward pass plus host-side copies of the normalized responses and labels.
struct Step {
    responses: Tensor,
    host: ResponseMap,
    labels: LabelMap,
}

fn forward_step(model: &Segmenter, x: &Tensor) -> Result<Step> {
    let responses = model.normalize(&model.forward_raw(x)?)?;
    let host = ResponseMap::from_tensor(&responses.detach(), true)?;
    let labels = argmax_labels(&host);
    Ok(Step {
        responses,
        host,
        labels,
    })
}

/// One loss evaluation and parameter update. Returns the loss parts.
fn update(
    model: &Segmenter,
    opt: &mut Sgd,
    step: &Step,
    cfg: &RunConfig,
    iter: usize,
) -> Result<crate::types::LossBreakdown> {
    let q_prime = step.labels.unique_count();
    let targets = loss::labels_tensor(&step.labels, model.device())?;
    let (total, parts) = loss::combined(&step.responses, &targets, &cfg.schedule, q_prime, cfg.reduction)?;
    if !parts.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter,
            sim: parts.sim,
            con: parts.con,
            mu: parts.mu,
        });
    }
    let grads = total.backward()?;
    opt.step(&grads)?;
    Ok(parts)
}

fn silhouette_threshold(
    image: &ImageTensor,
    first: &Step,
    cfg: &RunConfig,
) -> Result<(usize, Option<SilhouetteResult>)> {
    let q0 = first.labels.unique_count();
    let candidates: Vec<usize> = cfg.silhouette.candidates().into_iter().filter(|&k| k <= q0).collect();
    if candidates.is_empty() {
        // nothing to choose between: the floor is the starting count
        return Ok((q0, None));
    }
    match select_opt_nc(image, &first.host, &candidates, &cfg.silhouette, seed_all(cfg.seed)) {
        Ok(r) => Ok((r.opt_nc, Some(r))),
        Err(Error::SingleCluster) => Ok((q0, None)),
        Err(e) => Err(e),
    }
}

/// Segments one image with a freshly initialized model.
pub fn segment_image(image: &ImageTensor, cfg: &RunConfig) -> Result<SegmentationResult> {
    cfg.validate()?;
    let model = Segmenter::from_config(cfg, seed_all(cfg.seed))?;
    segment_with_model(&model, image, cfg)
}

/// Runs the per-image loop on an existing model (its weights are updated).
pub fn segment_with_model(model: &Segmenter, image: &ImageTensor, cfg: &RunConfig) -> Result<SegmentationResult> {
    let start = Instant::now();
    let x = model.input_tensor(image)?;
    let mut opt = Sgd::new(model.params().vars(), OptimizerSpec::from_config(cfg));
    let mut state = TrainState::default();
    let mut threshold = match cfg.stop {
        StopMode::Threshold { k } => Some(k),
        StopMode::Silhouette => None,
    };
    let mut silhouette = None;
    let mut last_valid: Option<LabelMap> = None;
    let final_labels;

    loop {
        let step = forward_step(model, &x)?;
        let q_prime = step.labels.unique_count();
        if threshold.is_none() {
            let (k, r) = silhouette_threshold(image, &step, cfg)?;
            threshold = Some(k);
            silhouette = r;
        }
        let floor = threshold.unwrap();
        let parts = update(model, &mut opt, &step, cfg, state.iter)?;
        state.push(q_prime, parts);

        match should_stop(q_prime, floor, state.iter, cfg.max_iters) {
            StopDecision::Continue => {
                last_valid = Some(step.labels);
            }
            StopDecision::StopMaxIters => {
                state.stopped_by = Some(StopReason::MaxIters);
                final_labels = step.labels;
                break;
            }
            StopDecision::StopThreshold => {
                state.stopped_by = Some(StopReason::Threshold);
                // an overshoot below the floor falls back to the last map that respected it
                final_labels = match last_valid {
                    Some(prev) if q_prime < floor => prev,
                    _ => step.labels,
                };
                break;
            }
        }
    }

    if let Some(path) = &cfg.log_path {
        write_log(&state.records, path)?;
    }
    Ok(SegmentationResult {
        source_id: image.source_id().to_string(),
        final_labels,
        state,
        silhouette,
        threshold,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Segments each image independently on a pool of `jobs` threads. Results
/// keep input order; a failure on one image does not stop the others.
pub fn segment_batch(images: &[ImageTensor], cfg: &RunConfig, jobs: usize) -> Result<Vec<Result<SegmentationResult>>> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let mut per_image = cfg.clone();
    per_image.log_path = None;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| images.par_iter().map(|img| segment_image(img, &per_image)).collect()))
}

/// Outcome of training one model over a whole image set.
#[derive(Debug, Clone)]
pub struct DatasetRun {
    pub labels: Vec<LabelMap>,
    pub state: TrainState,
}

/// Trains a single model for `max_iters` passes over `images`, one update per
/// image, then labels every image with the final model. Stops only on the
/// iteration cap.
pub fn train_dataset(images: &[ImageTensor], cfg: &RunConfig) -> Result<DatasetRun> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    if cfg.train_mode != TrainMode::Dataset {
        log::warn!("train_dataset called with per-image mode configured");
    }
    let model = Segmenter::from_config(cfg, seed_all(cfg.seed))?;
    let mut opt = Sgd::new(model.params().vars(), OptimizerSpec::from_config(cfg));
    let mut state = TrainState::default();
    let inputs: Vec<Tensor> = images.iter().map(|im| model.input_tensor(im)).collect::<Result<_>>()?;
    for _epoch in 0..cfg.max_iters {
        for x in &inputs {
            let step = forward_step(&model, x)?;
            let parts = update(&model, &mut opt, &step, cfg, state.iter)?;
            state.push(step.labels.unique_count(), parts);
        }
    }
    state.stopped_by = Some(StopReason::MaxIters);
    let labels = inputs
        .iter()
        .map(|x| forward_step(&model, x).map(|s| s.labels))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &cfg.log_path {
        write_log(&state.records, path)?;
    }
    Ok(DatasetRun { labels, state })
}

/// Writes one JSON object per iteration.
pub fn write_log(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Config(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::decode(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MuSchedule;
    use candle_core::{DType, Device};

    #[test]
    fn sgd_matches_reference_update() {
        let dev = Device::Cpu;
        let w = Var::from_vec(vec![1.0f64, -2.0], 2, &dev).unwrap();
        let spec = OptimizerSpec {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = Sgd::new(vec![w.clone()], spec);
        // loss = sum(w^2) / 2, gradient = w
        let (mut ref_w, mut buf) = ([1.0f64, -2.0], [0.0f64; 2]);
        for it in 0..3 {
            let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            for i in 0..2 {
                let g = ref_w[i] + 0.01 * ref_w[i];
                buf[i] = if it == 0 { g } else { 0.9 * buf[i] + g };
                ref_w[i] -= 0.1 * buf[i];
            }
        }
        let got = w.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..2 {
            assert!((got[i] - ref_w[i]).abs() < 1e-12);
        }
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.p = 8;
        cfg.q = 8;
        cfg.max_iters = 3;
        cfg.backbone.components = 2;
        cfg
    }

    fn tiny_image() -> ImageTensor {
        let px = ndarray::Array3::from_shape_fn((8, 8, 3), |(i, j, c)| ((i * 3 + j * 5 + c) % 7) as f32 / 7.0);
        ImageTensor::new(px, "tiny").unwrap()
    }

    #[test]
    fn threshold_one_runs_to_cap() {
        let mut cfg = tiny_cfg();
        cfg.stop = StopMode::Threshold { k: 1 };
        let r = segment_image(&tiny_image(), &cfg).unwrap();
        assert_eq!(r.state.iter, 3);
        assert_eq!(r.state.stopped_by, Some(StopReason::MaxIters));
        assert_eq!(r.state.records.len(), 3);
    }

    #[test]
    fn huge_threshold_stops_at_once() {
        let mut cfg = tiny_cfg();
        cfg.stop = StopMode::Threshold { k: 1000 };
        let r = segment_image(&tiny_image(), &cfg).unwrap();
        assert_eq!(r.state.iter, 1);
        assert_eq!(r.state.stopped_by, Some(StopReason::Threshold));
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.schedule = MuSchedule::scf();
        cfg.stop = StopMode::Threshold { k: 1 };
        cfg.log_path = Some(dir.path().join("run.jsonl"));
        let r = segment_image(&tiny_image(), &cfg).unwrap();
        let back = read_log(cfg.log_path.as_ref().unwrap()).unwrap();
        assert_eq!(back, r.state.records);
    }

    #[test]
    fn empty_batch() {
        assert!(matches!(segment_batch(&[], &tiny_cfg(), 1), Err(Error::EmptyBatch)));
    }
}

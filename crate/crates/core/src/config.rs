//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! schedule = scf
//! alpha = 50
//! backbone = resnet_fpn
//! backbone.weights_path = weights/resnet18.safetensors
//! silhouette.k_max = 20
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FSF_DEFAULT_ALPHA: f64 = 15.0;
pub const SCF_DEFAULT_ALPHA: f64 = 50.0;

/// How the balancing weight between the two losses is chosen each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuSchedule {
    /// Feature-similarity focus: `mu = q' / alpha`.
    Fsf { alpha: f64 },
    /// Spatial-continuity focus: `mu = alpha / q'`.
    Scf { alpha: f64 },
    /// Constant weight.
    Fixed { mu: f64 },
}

impl MuSchedule {
    pub fn fsf() -> Self {
        MuSchedule::Fsf {
            alpha: FSF_DEFAULT_ALPHA,
        }
    }

    pub fn scf() -> Self {
        MuSchedule::Scf {
            alpha: SCF_DEFAULT_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MuSchedule::Fsf { .. } => "fsf",
            MuSchedule::Scf { .. } => "scf",
            MuSchedule::Fixed { .. } => "fixed",
        }
    }

    /// The schedule's single free parameter (alpha, or mu for `Fixed`).
    pub fn parameter(&self) -> f64 {
        match *self {
            MuSchedule::Fsf { alpha } | MuSchedule::Scf { alpha } => alpha,
            MuSchedule::Fixed { mu } => mu,
        }
    }

    pub fn with_parameter(&self, value: f64) -> Self {
        match self {
            MuSchedule::Fsf { .. } => MuSchedule::Fsf { alpha: value },
            MuSchedule::Scf { .. } => MuSchedule::Scf { alpha: value },
            MuSchedule::Fixed { .. } => MuSchedule::Fixed { mu: value },
        }
    }

    /// Builds a schedule by name with its default parameter.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fsf" => Ok(Self::fsf()),
            "scf" => Ok(Self::scf()),
            "fixed" => Ok(MuSchedule::Fixed { mu: 5.0 }),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MuSchedule::Fsf { alpha } | MuSchedule::Scf { alpha } => alpha.is_finite() && alpha > 0.0,
            MuSchedule::Fixed { mu } => mu.is_finite() && mu >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule parameter in {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn,
    ResnetFpn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Number of conv -> ReLU -> BN components in the CNN extractor.
    pub components: usize,
    pub kernel_size: usize,
    pub padding: PaddingMode,
    /// Width of the pyramid levels in the residual decoder.
    pub pyramid_width: usize,
    pub upsample: UpsampleMode,
    pub weights_path: Option<PathBuf>,
    /// Allow random initialization when no pretrained weights are given.
    pub random_init: bool,
    pub head_bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Cnn,
            components: 3,
            kernel_size: 3,
            padding: PaddingMode::Replicate,
            pyramid_width: 461,
            upsample: UpsampleMode::Bilinear,
            weights_path: None,
            random_init: false,
            head_bias: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StopMode {
    /// Threshold on q' chosen per image by the silhouette score.
    Silhouette,
    /// Fixed threshold on q'.
    Threshold { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteFeatures {
    Responses,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    Manhattan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteConfig {
    pub sample_size: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub features: SilhouetteFeatures,
    pub metric: DistanceMetric,
}

impl Default for SilhouetteConfig {
    fn default() -> Self {
        Self {
            sample_size: 2000,
            k_min: 2,
            k_max: 20,
            restarts: 10,
            features: SilhouetteFeatures::Color,
            metric: DistanceMetric::Euclidean,
        }
    }
}

impl SilhouetteConfig {
    pub fn candidates(&self) -> Vec<usize> {
        (self.k_min.max(2)..=self.k_max).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PerImage,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: MuSchedule,
    /// Feature dimension.
    pub p: usize,
    /// Cluster-space dimension.
    pub q: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub backbone: BackboneConfig,
    pub stop: StopMode,
    pub silhouette: SilhouetteConfig,
    pub reduction: Reduction,
    pub train_mode: TrainMode,
    /// Shorter-side resize for dataset-wide training (0 disables).
    pub resize_short: usize,
    pub log_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: MuSchedule::fsf(),
            p: 100,
            q: 100,
            max_iters: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            backbone: BackboneConfig::default(),
            stop: StopMode::Silhouette,
            silhouette: SilhouetteConfig::default(),
            reduction: Reduction::Mean,
            train_mode: TrainMode::PerImage,
            resize_short: 320,
            log_path: None,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.p < 1 || self.q < 1 {
            return fail("p and q must be >= 1");
        }
        if self.max_iters < 1 {
            return fail("max_iters must be >= 1");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be nonnegative");
        }
        if self.backbone.components < 1 {
            return fail("backbone.components must be >= 1");
        }
        if self.backbone.kernel_size % 2 == 0 {
            return fail("backbone.kernel_size must be odd");
        }
        if let StopMode::Threshold { k } = self.stop {
            if k < 1 {
                return fail("threshold must be >= 1");
            }
        }
        if self.silhouette.k_max < self.silhouette.k_min.max(2) {
            return fail("silhouette.k_max must be >= max(2, k_min)");
        }
        if self.silhouette.sample_size < 2 || self.silhouette.restarts < 1 {
            return fail("silhouette.sample_size >= 2 and restarts >= 1 required");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "schedule" => {
                let prev = self.schedule;
                self.schedule = MuSchedule::from_name(value)?;
                // keep an explicitly set parameter when only the kind changes
                if prev.name() == self.schedule.name() {
                    self.schedule = prev;
                }
            }
            "alpha" => {
                let alpha = parse(key, value)?;
                self.schedule = match self.schedule {
                    MuSchedule::Fsf { .. } => MuSchedule::Fsf { alpha },
                    MuSchedule::Scf { .. } => MuSchedule::Scf { alpha },
                    MuSchedule::Fixed { .. } => {
                        return Err(Error::Config("alpha given for fixed schedule".into()))
                    }
                }
            }
            "mu" => {
                let mu = parse(key, value)?;
                self.schedule = MuSchedule::Fixed { mu };
            }
            "p" => self.p = parse(key, value)?,
            "q" => self.q = parse(key, value)?,
            "iters" | "max_iters" => self.max_iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "backbone" | "backbone.kind" => {
                self.backbone.kind = match value {
                    "cnn" => BackboneKind::Cnn,
                    "resnet_fpn" | "resnet" => BackboneKind::ResnetFpn,
                    _ => return Err(Error::Config(format!("unknown backbone '{value}'"))),
                }
            }
            "backbone.components" => self.backbone.components = parse(key, value)?,
            "backbone.kernel_size" => self.backbone.kernel_size = parse(key, value)?,
            "backbone.padding" => {
                self.backbone.padding = match value {
                    "zeros" => PaddingMode::Zeros,
                    "replicate" => PaddingMode::Replicate,
                    _ => return Err(Error::Config(format!("unknown padding '{value}'"))),
                }
            }
            "backbone.pyramid_width" => self.backbone.pyramid_width = parse(key, value)?,
            "backbone.upsample" => {
                self.backbone.upsample = match value {
                    "nearest" => UpsampleMode::Nearest,
                    "bilinear" => UpsampleMode::Bilinear,
                    _ => return Err(Error::Config(format!("unknown upsample mode '{value}'"))),
                }
            }
            "backbone.weights_path" => self.backbone.weights_path = opt_path(value),
            "backbone.random_init" => self.backbone.random_init = parse_bool(key, value)?,
            "backbone.head_bias" => self.backbone.head_bias = parse_bool(key, value)?,
            "stop" => {
                self.stop = match value {
                    "silhouette" => StopMode::Silhouette,
                    "threshold" => StopMode::Threshold { k: 3 },
                    _ => return Err(Error::Config(format!("unknown stop mode '{value}'"))),
                }
            }
            "threshold" => self.stop = StopMode::Threshold { k: parse(key, value)? },
            "silhouette.enabled" => {
                self.stop = if parse_bool(key, value)? {
                    StopMode::Silhouette
                } else {
                    match self.stop {
                        StopMode::Threshold { k } => StopMode::Threshold { k },
                        StopMode::Silhouette => StopMode::Threshold { k: 3 },
                    }
                }
            }
            "silhouette.sample_size" => self.silhouette.sample_size = parse(key, value)?,
            "silhouette.k_min" => self.silhouette.k_min = parse(key, value)?,
            "silhouette.k_max" => self.silhouette.k_max = parse(key, value)?,
            "silhouette.restarts" => self.silhouette.restarts = parse(key, value)?,
            "silhouette.features" => {
                self.silhouette.features = match value {
                    "responses" => SilhouetteFeatures::Responses,
                    "color" => SilhouetteFeatures::Color,
                    _ => return Err(Error::Config(format!("unknown feature source '{value}'"))),
                }
            }
            "silhouette.metric" => {
                self.silhouette.metric = match value {
                    "euclidean" => DistanceMetric::Euclidean,
                    "manhattan" => DistanceMetric::Manhattan,
                    _ => return Err(Error::Config(format!("unknown metric '{value}'"))),
                }
            }
            "loss.reduction" => {
                self.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("unknown reduction '{value}'"))),
                }
            }
            "train.mode" => {
                self.train_mode = match value {
                    "per_image" => TrainMode::PerImage,
                    "dataset" => TrainMode::Dataset,
                    _ => return Err(Error::Config(format!("unknown train mode '{value}'"))),
                }
            }
            "train.log_path" => self.log_path = opt_path(value),
            "dataset.resize_short" => self.resize_short = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every setting of a flat config text on top of `self`.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the flat format; `from_str(to_kv_string())` reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("schedule", self.schedule.name().into());
        match self.schedule {
            MuSchedule::Fixed { mu } => kv("mu", mu.to_string()),
            MuSchedule::Fsf { alpha } | MuSchedule::Scf { alpha } => kv("alpha", alpha.to_string()),
        }
        kv("p", self.p.to_string());
        kv("q", self.q.to_string());
        kv("iters", self.max_iters.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("seed", self.seed.to_string());
        let b = &self.backbone;
        kv(
            "backbone",
            match b.kind {
                BackboneKind::Cnn => "cnn",
                BackboneKind::ResnetFpn => "resnet_fpn",
            }
            .into(),
        );
        kv("backbone.components", b.components.to_string());
        kv("backbone.kernel_size", b.kernel_size.to_string());
        kv(
            "backbone.padding",
            match b.padding {
                PaddingMode::Zeros => "zeros",
                PaddingMode::Replicate => "replicate",
            }
            .into(),
        );
        kv("backbone.pyramid_width", b.pyramid_width.to_string());
        kv(
            "backbone.upsample",
            match b.upsample {
                UpsampleMode::Nearest => "nearest",
                UpsampleMode::Bilinear => "bilinear",
            }
            .into(),
        );
        kv(
            "backbone.weights_path",
            b.weights_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv("backbone.random_init", b.random_init.to_string());
        kv("backbone.head_bias", b.head_bias.to_string());
        match self.stop {
            StopMode::Silhouette => kv("stop", "silhouette".into()),
            StopMode::Threshold { k } => kv("threshold", k.to_string()),
        }
        let sc = &self.silhouette;
        kv("silhouette.sample_size", sc.sample_size.to_string());
        kv("silhouette.k_min", sc.k_min.to_string());
        kv("silhouette.k_max", sc.k_max.to_string());
        kv("silhouette.restarts", sc.restarts.to_string());
        kv(
            "silhouette.features",
            match sc.features {
                SilhouetteFeatures::Responses => "responses",
                SilhouetteFeatures::Color => "color",
            }
            .into(),
        );
        kv(
            "silhouette.metric",
            match sc.metric {
                DistanceMetric::Euclidean => "euclidean",
                DistanceMetric::Manhattan => "manhattan",
            }
            .into(),
        );
        kv(
            "loss.reduction",
            match self.reduction {
                Reduction::Mean => "mean",
                Reduction::Sum => "sum",
            }
            .into(),
        );
        kv(
            "train.mode",
            match self.train_mode {
                TrainMode::PerImage => "per_image",
                TrainMode::Dataset => "dataset",
            }
            .into(),
        );
        kv(
            "train.log_path",
            self.log_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv("dataset.resize_short", self.resize_short.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let c = RunConfig::default();
        assert_eq!(c.p, 100);
        assert_eq!(c.q, 100);
        assert_eq!(c.lr, 0.1);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.backbone.components, 3);
        assert_eq!(c.max_iters, 64);
        assert_eq!(MuSchedule::fsf(), MuSchedule::Fsf { alpha: 15.0 });
        assert_eq!(MuSchedule::scf(), MuSchedule::Scf { alpha: 50.0 });
        c.validate().unwrap();
    }

    #[test]
    fn schedule_switch_takes_that_schedules_default_alpha() {
        let c = RunConfig::from_str("schedule = scf").unwrap();
        assert_eq!(c.schedule, MuSchedule::Scf { alpha: 50.0 });
        let c = RunConfig::from_str("schedule = scf\nalpha = 25").unwrap();
        assert_eq!(c.schedule, MuSchedule::Scf { alpha: 25.0 });
        let c = RunConfig::from_str("schedule = fixed\nmu = 5").unwrap();
        assert_eq!(c.schedule, MuSchedule::Fixed { mu: 5.0 });
    }

    #[test]
    fn kv_round_trip() {
        let mut c = RunConfig::default();
        c.schedule = MuSchedule::Scf { alpha: 75.0 };
        c.stop = StopMode::Threshold { k: 4 };
        c.backbone.kind = BackboneKind::ResnetFpn;
        c.backbone.weights_path = Some("w.safetensors".into());
        c.log_path = Some("/tmp/x.jsonl".into());
        c.reduction = Reduction::Sum;
        let back = RunConfig::from_str(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_str("alpha = -1").is_err());
        assert!(RunConfig::from_str("iters = 0").is_err());
        assert!(RunConfig::from_str("bogus = 1").is_err());
        assert!(RunConfig::from_str("schedule").is_err());
        assert!(RunConfig::from_str("schedule = fixed\nalpha = 3").is_err());
    }
}

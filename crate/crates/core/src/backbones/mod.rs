//! Feature extractors and the linear classifier head.
//!
//! A [`Segmenter`] is `extractor -> 1x1 classifier -> batch norm`. The
//! extractor is either the small stride-1 CNN or the residual encoder with a
//! pyramid decoder; both emit features at input resolution.

pub mod cnn;
pub mod layers;
pub mod resnet_fpn;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

pub use cnn::{CnnBackboneSpec, CnnExtractor};
pub use layers::ParamStore;
pub use resnet_fpn::{ResNetFpnExtractor, ResNetFpnSpec};

use crate::config::{BackboneKind, RunConfig};
use crate::error::{Error, Result};
use crate::types::{FeatureMap, ImageTensor, ResponseMap, SeedStreams, Stream};
use layers::{BatchNorm2d, Conv2d, ConvSpec};

/// Pixel-wise linear map from `p` features to `q` responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub p: usize,
    pub q: usize,
    pub bias: bool,
}

impl ClassifierHead {
    /// Head weights plus the response batch-norm scale and shift.
    pub fn param_count(&self) -> usize {
        self.p * self.q + if self.bias { self.q } else { 0 } + 2 * self.q
    }
}

pub enum Extractor {
    Cnn(CnnExtractor),
    ResNetFpn(ResNetFpnExtractor),
}

/// Source of encoder weights for the residual backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource<'a> {
    /// safetensors file with torchvision-style names.
    File(&'a Path),
    /// Explicitly requested random initialization.
    RandomInit,
    /// Nothing configured.
    Missing,
}

pub struct Segmenter {
    extractor: Extractor,
    head: Conv2d,
    head_norm: BatchNorm2d,
    store: ParamStore,
    input_stats: Option<([f32; 3], [f32; 3])>,
    device: Device,
}

impl Segmenter {
    /// Builds the configured backbone with seeded initialization.
    pub fn from_config(cfg: &RunConfig, seeds: SeedStreams) -> Result<Self> {
        let head = ClassifierHead {
            p: cfg.p,
            q: cfg.q,
            bias: cfg.backbone.head_bias,
        };
        match cfg.backbone.kind {
            BackboneKind::Cnn => {
                let spec = CnnBackboneSpec {
                    components: cfg.backbone.components,
                    channels: cfg.p,
                    kernel_size: cfg.backbone.kernel_size,
                    padding: cfg.backbone.padding,
                };
                Self::cnn(&spec, head, seeds)
            }
            BackboneKind::ResnetFpn => {
                let spec = ResNetFpnSpec {
                    pyramid_width: cfg.backbone.pyramid_width,
                    feature_dim: cfg.p,
                    upsample: cfg.backbone.upsample,
                };
                let source = match (&cfg.backbone.weights_path, cfg.backbone.random_init) {
                    (Some(p), _) => WeightSource::File(p),
                    (None, true) => WeightSource::RandomInit,
                    (None, false) => WeightSource::Missing,
                };
                Self::resnet_fpn(&spec, head, source, seeds)
            }
        }
    }

    pub fn cnn(spec: &CnnBackboneSpec, head: ClassifierHead, seeds: SeedStreams) -> Result<Self> {
        if head.p != spec.channels {
            return Err(Error::InvalidSpec(format!(
                "head expects {} features, extractor gives {}",
                head.p, spec.channels
            )));
        }
        let device = Device::Cpu;
        let mut rng = seeds.rng(Stream::WeightInit);
        let mut store = ParamStore::default();
        let extractor = CnnExtractor::new(spec, &mut store, &mut rng, &device)?;
        Self::finish(Extractor::Cnn(extractor), head, store, None, &mut rng, device)
    }

    pub fn resnet_fpn(
        spec: &ResNetFpnSpec,
        head: ClassifierHead,
        source: WeightSource<'_>,
        seeds: SeedStreams,
    ) -> Result<Self> {
        if head.p != spec.feature_dim {
            return Err(Error::InvalidSpec(format!(
                "head expects {} features, decoder gives {}",
                head.p, spec.feature_dim
            )));
        }
        let pretrained = match source {
            WeightSource::File(path) => Some(load_weights(path)?),
            WeightSource::RandomInit => None,
            WeightSource::Missing => {
                return Err(Error::WeightsUnavailable(
                    "no weights path configured and random init not requested".into(),
                ))
            }
        };
        let device = Device::Cpu;
        let mut rng = seeds.rng(Stream::WeightInit);
        let mut store = ParamStore::default();
        let extractor = ResNetFpnExtractor::new(spec, &mut store, &mut rng, &device)?;
        if let Some(weights) = pretrained {
            apply_encoder_weights(&store, &weights)?;
        }
        Self::finish(
            Extractor::ResNetFpn(extractor),
            head,
            store,
            Some((resnet_fpn::IMAGENET_MEAN, resnet_fpn::IMAGENET_STD)),
            &mut rng,
            device,
        )
    }

    fn finish(
        extractor: Extractor,
        head: ClassifierHead,
        mut store: ParamStore,
        input_stats: Option<([f32; 3], [f32; 3])>,
        rng: &mut rand_chacha::ChaCha8Rng,
        device: Device,
    ) -> Result<Self> {
        let mut spec = ConvSpec::new(head.p, head.q, 1).padding(0);
        if !head.bias {
            spec = spec.no_bias();
        }
        let head_conv = Conv2d::new(spec, "head", &mut store, rng, &device)?;
        let head_norm = BatchNorm2d::new(head.q, "head_norm", &mut store, &device)?;
        Ok(Self {
            extractor,
            head: head_conv,
            head_norm,
            store,
            input_stats,
            device,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Input tensor for `image`, with channel whitening for the pretrained encoder.
    pub fn input_tensor(&self, image: &ImageTensor) -> Result<Tensor> {
        let x = image.to_tensor(&self.device)?;
        match self.input_stats {
            None => Ok(x),
            Some((mean, std)) => {
                let mean = Tensor::new(&mean, &self.device)?.reshape((1, 3, 1, 1))?;
                let std = Tensor::new(&std, &self.device)?.reshape((1, 3, 1, 1))?;
                Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
            }
        }
    }

    /// `(1, p, H, W)` features.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {c}")));
        }
        match &self.extractor {
            Extractor::Cnn(e) => e.forward(x),
            Extractor::ResNetFpn(e) => e.forward(x),
        }
    }

    /// `(1, q, H, W)` unnormalized responses.
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }

    /// Response batch norm (statistics of the current map).
    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        self.head_norm.forward(raw)
    }

    pub fn extract_features(&self, image: &ImageTensor) -> Result<FeatureMap> {
        FeatureMap::from_tensor(&self.features(&self.input_tensor(image)?)?)
    }

    /// Unnormalized response map for `image`.
    pub fn forward(&self, image: &ImageTensor) -> Result<ResponseMap> {
        let raw = self.forward_raw(&self.input_tensor(image)?)?;
        ResponseMap::from_tensor(&raw, false)
    }
}

fn load_weights(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::WeightsUnavailable(format!("{} not found", path.display())));
    }
    candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::WeightsUnavailable(format!("{}: {e}", path.display())))
}

/// Copies every encoder tensor from `weights` into the store. Decoder and
/// head parameters keep their fresh initialization.
fn apply_encoder_weights(store: &ParamStore, weights: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in store.iter() {
        if name.starts_with("fpn.") || name.starts_with("head") {
            continue;
        }
        let t = weights
            .get(name)
            .ok_or_else(|| Error::WeightsUnavailable(format!("missing tensor '{name}'")))?;
        if t.dims() != var.dims() {
            return Err(Error::WeightsUnavailable(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(DType::F32)?)?;
    }
    Ok(())
}

/// Closed-form parameter count of a configured model.
pub fn expected_param_count(cfg: &RunConfig) -> usize {
    let head = ClassifierHead {
        p: cfg.p,
        q: cfg.q,
        bias: cfg.backbone.head_bias,
    };
    let extractor = match cfg.backbone.kind {
        BackboneKind::Cnn => CnnBackboneSpec {
            components: cfg.backbone.components,
            channels: cfg.p,
            kernel_size: cfg.backbone.kernel_size,
            padding: cfg.backbone.padding,
        }
        .param_count(),
        BackboneKind::ResnetFpn => ResNetFpnSpec {
            pyramid_width: cfg.backbone.pyramid_width,
            feature_dim: cfg.p,
            upsample: cfg.backbone.upsample,
        }
        .param_count(),
    };
    extractor + head.param_count()
}

//! 18-layer residual encoder (classification head removed) with a
//! feature-pyramid decoder producing dense full-resolution features.
//!
//! Encoder parameter names follow the torchvision layout (`conv1.weight`,
//! `layer2.0.downsample.0.weight`, ...) so a converted checkpoint can be
//! loaded directly.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::layers::{max_pool_3x3_s2, resize, BatchNorm2d, Conv2d, ConvSpec, ParamStore};
use crate::config::UpsampleMode;
use crate::error::{Error, Result};

/// Channel widths of the four residual stages.
pub const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// ImageNet statistics the pretrained encoder expects.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetFpnSpec {
    /// Width of every pyramid level.
    pub pyramid_width: usize,
    /// Channels of the smoothed output feature map.
    pub feature_dim: usize,
    pub upsample: UpsampleMode,
}

impl Default for ResNetFpnSpec {
    fn default() -> Self {
        Self {
            pyramid_width: 461,
            feature_dim: 100,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl ResNetFpnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_width < 1 || self.feature_dim < 1 {
            return Err(Error::InvalidSpec("pyramid width and feature dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder parameters (convolutions and batch-norm affine terms).
    pub fn encoder_param_count() -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let mut n = conv(3, 64, 7) + bn(64);
        let mut in_ch = 64;
        for (stage, &out) in STAGE_CHANNELS.iter().enumerate() {
            for block in 0..2 {
                let cin = if block == 0 { in_ch } else { out };
                n += conv(cin, out, 3) + bn(out) + conv(out, out, 3) + bn(out);
                if block == 0 && stage > 0 {
                    n += conv(cin, out, 1) + bn(out);
                }
            }
            in_ch = out;
        }
        n
    }

    /// Decoder parameters: four lateral 1x1 projections and the 3x3 smoothing conv.
    pub fn decoder_param_count(&self) -> usize {
        let w = self.pyramid_width;
        let laterals: usize = STAGE_CHANNELS.iter().map(|c| c * w + w).sum();
        laterals + 9 * w * self.feature_dim + self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        Self::encoder_param_count() + self.decoder_param_count()
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            ConvSpec::new(in_ch, out_ch, 3).stride(stride).no_bias(),
            &format!("{name}.conv1"),
            store,
            rng,
            device,
        )?;
        let bn1 = BatchNorm2d::new(out_ch, &format!("{name}.bn1"), store, device)?;
        let conv2 = Conv2d::new(
            ConvSpec::new(out_ch, out_ch, 3).no_bias(),
            &format!("{name}.conv2"),
            store,
            rng,
            device,
        )?;
        let bn2 = BatchNorm2d::new(out_ch, &format!("{name}.bn2"), store, device)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::new(
                ConvSpec::new(in_ch, out_ch, 1).stride(stride).padding(0).no_bias(),
                &format!("{name}.downsample.0"),
                store,
                rng,
                device,
            )?;
            let bn = BatchNorm2d::new(out_ch, &format!("{name}.downsample.1"), store, device)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

pub struct ResNetFpnExtractor {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
    upsample: UpsampleMode,
}

impl ResNetFpnExtractor {
    pub fn new(
        spec: &ResNetFpnSpec,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        spec.validate()?;
        let conv1 = Conv2d::new(
            ConvSpec::new(3, 64, 7).stride(2).padding(3).no_bias(),
            "conv1",
            store,
            rng,
            device,
        )?;
        let bn1 = BatchNorm2d::new(64, "bn1", store, device)?;
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for (s, &out) in STAGE_CHANNELS.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let b0 = BasicBlock::new(&format!("layer{}.0", s + 1), in_ch, out, stride, store, rng, device)?;
            let b1 = BasicBlock::new(&format!("layer{}.1", s + 1), out, out, 1, store, rng, device)?;
            stages.push(vec![b0, b1]);
            in_ch = out;
        }
        let mut laterals = Vec::new();
        for (s, &c) in STAGE_CHANNELS.iter().enumerate() {
            laterals.push(Conv2d::new(
                ConvSpec::new(c, spec.pyramid_width, 1).padding(0),
                &format!("fpn.lateral{}", s + 2),
                store,
                rng,
                device,
            )?);
        }
        let smooth = Conv2d::new(
            ConvSpec::new(spec.pyramid_width, spec.feature_dim, 3),
            "fpn.smooth",
            store,
            rng,
            device,
        )?;
        Ok(Self {
            conv1,
            bn1,
            stages,
            laterals,
            smooth,
            upsample: spec.upsample,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let stem = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let mut cur = max_pool_3x3_s2(&stem)?;
        let mut pyramid_inputs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                cur = block.forward(&cur)?;
            }
            pyramid_inputs.push(cur.clone());
        }
        // top-down: coarsest level first, each upsampled onto the next lateral
        let mut top = self.laterals[3].forward(&pyramid_inputs[3])?;
        for level in (0..3).rev() {
            let lateral = self.laterals[level].forward(&pyramid_inputs[level])?;
            let (_, _, lh, lw) = lateral.dims4()?;
            top = (lateral + resize(&top, lh, lw, self.upsample)?)?;
        }
        let smoothed = self.smooth.forward(&top)?;
        resize(&smoothed, h, w, self.upsample)
    }
}

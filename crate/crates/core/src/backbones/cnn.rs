use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, ConvSpec, ParamStore};
use crate::config::PaddingMode;
use crate::error::{Error, Result};

/// Shape of the convolutional extractor: `components` blocks of
/// conv -> ReLU -> batch norm, all stride 1 and without pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnBackboneSpec {
    pub components: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub padding: PaddingMode,
}

impl Default for CnnBackboneSpec {
    fn default() -> Self {
        Self {
            components: 3,
            channels: 100,
            kernel_size: 3,
            padding: PaddingMode::Replicate,
        }
    }
}

impl CnnBackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components < 1 {
            return Err(Error::InvalidSpec("need at least one component".into()));
        }
        if self.channels < 1 {
            return Err(Error::InvalidSpec("feature dimension must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidSpec("kernel size must be odd".into()));
        }
        Ok(())
    }

    /// Trainable parameters of the extractor alone (conv weights, conv
    /// biases, batch-norm scale and shift).
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let p = self.channels;
        let first = 3 * k2 * p + p + 2 * p;
        let rest = (self.components - 1) * (p * k2 * p + p + 2 * p);
        first + rest
    }
}

pub struct CnnExtractor {
    blocks: Vec<(Conv2d, BatchNorm2d)>,
}

impl CnnExtractor {
    pub fn new(
        spec: &CnnBackboneSpec,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.components);
        for i in 0..spec.components {
            let in_ch = if i == 0 { 3 } else { spec.channels };
            let conv = Conv2d::new(
                ConvSpec::new(in_ch, spec.channels, spec.kernel_size).pad_mode(spec.padding),
                &format!("components.{i}.conv"),
                store,
                rng,
                device,
            )?;
            let norm = BatchNorm2d::new(spec.channels, &format!("components.{i}.norm"), store, device)?;
            blocks.push((conv, norm));
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, norm) in &self.blocks {
            h = norm.forward(&conv.forward(&h)?.relu()?)?;
        }
        Ok(h)
    }
}

//! Trainable building blocks on top of candle tensors.
//!
//! Everything here assumes a batch of one image in NCHW layout, which is the
//! only shape the per-image optimizer ever feeds through.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PaddingMode, UpsampleMode};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Named trainable parameters in registration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, var: Var) -> Var {
        self.params.push((name.into(), var.clone()));
        var
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub fn fan_in_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    device: &Device,
) -> Result<Var> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, device)?)?)
}

fn filled(value: f32, len: usize, device: &Device) -> Result<Var> {
    Ok(Var::from_tensor(&Tensor::full(value, len, device)?)?)
}

/// 2-D convolution. Stride-1 convolutions go through an explicit im2col +
/// matmul, which keeps the backward pass on the matmul kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pad_mode: PaddingMode,
}

pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub pad_mode: PaddingMode,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
            pad_mode: PaddingMode::Zeros,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn pad_mode(mut self, mode: PaddingMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

impl Conv2d {
    pub fn new(
        spec: ConvSpec,
        name: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let weight = fan_in_uniform(
            rng,
            &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
            fan_in,
            device,
        )?;
        let weight = store.push(format!("{name}.weight"), weight);
        let bias = if spec.bias {
            Some(store.push(format!("{name}.bias"), filled(0.0, spec.out_ch, device)?))
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            pad_mode: spec.pad_mode,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    fn pad(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.padding;
        if p == 0 {
            return Ok(x.clone());
        }
        Ok(match self.pad_mode {
            PaddingMode::Zeros => x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?,
            PaddingMode::Replicate => x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?,
        })
    }

    fn forward_im2col(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let k = self.kernel;
        let out_h = h + 2 * self.padding + 1 - k;
        let out_w = w + 2 * self.padding + 1 - k;
        let cols = if k == 1 {
            self.pad(x)?.reshape((c, out_h * out_w))?
        } else {
            let xp = self.pad(x)?.squeeze(0)?;
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(xp.narrow(1, dy, out_h)?.narrow(2, dx, out_w)?);
                }
            }
            // (C, k*k, H, W) matches the (out, in, kh, kw) weight flattening
            Tensor::stack(&taps, 1)?.reshape((c * k * k, out_h * out_w))?
        };
        let wmat = self.weight.as_tensor().reshape((self.out_ch, c * k * k))?;
        let mut y = wmat.matmul(&cols)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.as_tensor().unsqueeze(1)?)?;
        }
        Ok(y.reshape((1, self.out_ch, out_h, out_w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        if self.stride == 1 && b == 1 {
            return self.forward_im2col(x);
        }
        let xp = self.pad(x)?;
        let mut y = xp.conv2d(self.weight.as_tensor(), 0, self.stride, 1, 1)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.as_tensor().reshape((1, self.out_ch, 1, 1))?)?;
        }
        Ok(y)
    }
}

/// Batch normalization using the statistics of the current input
/// (training-mode behaviour, biased variance).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize, name: &str, store: &mut ParamStore, device: &Device) -> Result<Self> {
        let gamma = store.push(format!("{name}.weight"), filled(1.0, channels, device)?);
        let beta = store.push(format!("{name}.bias"), filled(0.0, channels, device)?);
        Ok(Self {
            gamma,
            beta,
            channels,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn beta(&self) -> &Var {
        &self.beta
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let y = normed
            .broadcast_mul(&self.gamma.as_tensor().unsqueeze(1)?)?
            .broadcast_add(&self.beta.as_tensor().unsqueeze(1)?)?;
        Ok(y.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Interpolation matrix mapping `src` samples to `dst` samples
/// (half-pixel centers, edge clamped).
pub fn interpolation_matrix(dst: usize, src: usize, mode: UpsampleMode) -> Vec<f32> {
    let mut m = vec![0f32; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        match mode {
            UpsampleMode::Nearest => {
                let s = ((i as f64 * scale).floor() as usize).min(src - 1);
                m[i * src + s] = 1.0;
            }
            UpsampleMode::Bilinear => {
                let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let frac = (pos - i0 as f64) as f32;
                m[i * src + i0] += 1.0 - frac;
                m[i * src + i1] += frac;
            }
        }
    }
    m
}

/// Resizes a `(1, C, H, W)` tensor to `(1, C, out_h, out_w)` as two matmuls.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let ah = Tensor::from_vec(interpolation_matrix(out_h, h, mode), (out_h, h), dev)?.to_dtype(dtype)?;
    let aw_t = Tensor::from_vec(interpolation_matrix(out_w, w, mode), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let x = x.squeeze(0)?;
    let rows = x.broadcast_matmul(&aw_t)?; // (C, H, out_w)
    let out = ah.broadcast_matmul(&rows)?; // (C, out_h, out_w)
    Ok(out.reshape((1, c, out_h, out_w))?)
}

/// 3x3 / stride-2 / pad-1 max pooling over nonnegative inputs.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let tap = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => tap,
                Some(a) => a.maximum(&tap)?,
            });
        }
    }
    let dense = acc.unwrap();
    // keep every other row/column starting at 0
    let eh = h + h % 2;
    let ew = w + w % 2;
    let dense = dense.pad_with_zeros(2, 0, eh - h)?.pad_with_zeros(3, 0, ew - w)?;
    let out = dense
        .reshape((1, c, eh / 2, 2, ew / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((1, c, eh / 2, ew / 2))?;
    Ok(out)
}

pub fn to_f64_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn im2col_matches_native_conv() {
        let dev = Device::Cpu;
        let mut r = rng();
        let mut store = ParamStore::default();
        let conv = Conv2d::new(ConvSpec::new(3, 5, 3), "c", &mut store, &mut r, &dev).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 7, 6), &dev).unwrap();
        let ours = conv.forward(&x).unwrap();
        let native = x
            .conv2d(conv.weight().as_tensor(), 1, 1, 1, 1)
            .unwrap();
        let diff = (ours - native).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn replicate_padding_keeps_constant_input_constant() {
        let dev = Device::Cpu;
        let mut store = ParamStore::default();
        let conv = Conv2d::new(
            ConvSpec::new(2, 3, 3).pad_mode(PaddingMode::Replicate),
            "c",
            &mut store,
            &mut rng(),
            &dev,
        )
        .unwrap();
        let x = Tensor::full(0.3f32, (1, 2, 5, 5), &dev).unwrap();
        let y = conv.forward(&x).unwrap().squeeze(0).unwrap();
        for ch in y.to_vec3::<f32>().unwrap() {
            let first = ch[0][0];
            assert!(ch.iter().flatten().all(|v| (v - first).abs() < 1e-6));
        }
    }

    #[test]
    fn batch_norm_standardizes() {
        let dev = Device::Cpu;
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(4, "bn", &mut store, &dev).unwrap();
        let x = (Tensor::rand(0f32, 1., (1, 4, 6, 5), &dev).unwrap() * 7.0).unwrap();
        let y = bn.forward(&x).unwrap().squeeze(0).unwrap().flatten_from(1).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f32>().unwrap();
        let var = y.sqr().unwrap().mean(1).unwrap().to_vec1::<f32>().unwrap();
        for (m, v) in mean.iter().zip(var) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        for (d, s) in [(8, 3), (5, 5), (7, 2), (3, 8)] {
            let m = interpolation_matrix(d, s, UpsampleMode::Bilinear);
            for row in m.chunks(s) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_constant_is_constant() {
        let dev = Device::Cpu;
        let x = Tensor::full(2.5f32, (1, 2, 3, 4), &dev).unwrap();
        let y = resize(&x, 9, 7, UpsampleMode::Bilinear).unwrap();
        assert_eq!(y.dims(), &[1, 2, 9, 7]);
        let vals = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }

    #[test]
    fn max_pool_shapes_and_values() {
        let dev = Device::Cpu;
        for (h, w) in [(8, 8), (7, 5), (2, 3)] {
            let x = Tensor::rand(0f32, 1., (1, 2, h, w), &dev).unwrap();
            let y = max_pool_3x3_s2(&x).unwrap();
            assert_eq!(y.dims(), &[1, 2, h.div_ceil(2), w.div_ceil(2)]);
            let xv = x.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
            let yv = y.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
            for c in 0..2 {
                for oy in 0..h.div_ceil(2) {
                    for ox in 0..w.div_ceil(2) {
                        let mut m = 0f32;
                        for iy in (2 * oy).saturating_sub(1)..=(2 * oy + 1).min(h - 1) {
                            for ix in (2 * ox).saturating_sub(1)..=(2 * ox + 1).min(w - 1) {
                                m = m.max(xv[c][iy][ix]);
                            }
                        }
                        assert_eq!(yv[c][oy][ox], m);
                    }
                }
            }
        }
    }
}

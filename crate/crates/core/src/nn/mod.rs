//! Learnable components: the shared rain-mask learner, U-net generators,
//! multi-scale and paired discriminators, and the frozen perceptual backbone.

mod disc;
mod im2col;
mod model;
mod perceptual;
mod ssrml;
mod unet;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use disc::{min_disc_input, DiscScores, DiscStack, MultiScaleDisc, PairedDisc};
pub use model::{reflect_pad, DerainModel, Derainer, GeneratorChoice, IdentityDerainer, ParamGroup};
pub use perceptual::{BackboneConfig, FeatureExtractor, VGG16_LAYERS};
pub use ssrml::Ssrml;
pub use unet::{Reconstructor, UNet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ssrml_channels: usize,
    pub ssrml_iterations: usize,
    pub ssrml_blocks: usize,
    pub unet_depth: usize,
    pub unet_base_channels: usize,
    pub disc_scales: usize,
    pub disc_layers_per_scale: usize,
    pub disc_base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ssrml_channels: 32,
            ssrml_iterations: 4,
            ssrml_blocks: 5,
            unet_depth: 4,
            unet_base_channels: 64,
            disc_scales: 3,
            disc_layers_per_scale: 5,
            disc_base_channels: 64,
        }
    }
}

impl ModelConfig {
    /// Small enough to train a few hundred steps on one CPU core.
    pub fn desk() -> Self {
        Self {
            ssrml_channels: 8,
            ssrml_iterations: 2,
            ssrml_blocks: 2,
            unet_depth: 2,
            unet_base_channels: 16,
            disc_scales: 3,
            disc_layers_per_scale: 5,
            disc_base_channels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ssrml_channels", self.ssrml_channels),
            ("ssrml_iterations", self.ssrml_iterations),
            ("ssrml_blocks", self.ssrml_blocks),
            ("unet_depth", self.unet_depth),
            ("unet_base_channels", self.unet_base_channels),
            ("disc_scales", self.disc_scales),
            ("disc_layers_per_scale", self.disc_layers_per_scale),
            ("disc_base_channels", self.disc_base_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Spatial sizes handed to the generators must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.unet_depth
    }
}

/// Named trainable parameters, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            device,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Parameters whose name starts with `prefix.`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars
            .iter()
            .filter(move |(name, _)| name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values from a seeded stream.
pub struct ParamBuilder<'a> {
    store: Option<&'a mut ParamStore>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    device: Device,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        let (device, dtype) = (store.device.clone(), store.dtype);
        Self {
            store: Some(store),
            rng,
            prefix: String::new(),
            device,
            dtype,
        }
    }

    /// Builder for constant (untracked) tensors, e.g. a frozen backbone.
    pub fn frozen(rng: &'a mut ChaCha8Rng, device: Device, dtype: DType) -> Self {
        Self {
            store: None,
            rng,
            prefix: String::new(),
            device,
            dtype,
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store.as_deref_mut(),
            rng: self.rng,
            prefix,
            device: self.device.clone(),
            dtype: self.dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn tensor(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        match self.store.as_deref_mut() {
            Some(store) => store.insert(full, t),
            None => Ok(t),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.tensor(name, shape, values)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.tensor(name, shape, vec![0.0; n])
    }
}

/// How a convolution pads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of the given width.
    Fixed(usize),
    /// TF-style "same" padding: output side is `ceil(input / stride)`, extra row/column at the end.
    Same,
}

/// 2-d convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    /// He-uniform initialisation (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = pb.uniform("weight", &[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt())?;
        let bias = pb.zeros("bias", &[out_ch])?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero weights and bias; used for output heads that must start neutral.
    pub fn zeroed(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = pb.zeros("weight", &[out_ch, in_ch, kernel, kernel])?;
        let bias = pb.zeros("bias", &[out_ch])?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: Padding::Fixed(kernel / 2),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, channels, height, width) = x.dims4()?;
        let kernel = self.weight.dims()[2];
        let stride = self.stride;
        let (pad_top, pad_left, out_h, out_w) = match self.padding {
            Padding::Fixed(p) => {
                if height + 2 * p < kernel || width + 2 * p < kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "{height}x{width} input is smaller than the {kernel}x{kernel} kernel"
                    )));
                }
                (
                    p,
                    p,
                    (height + 2 * p - kernel) / stride + 1,
                    (width + 2 * p - kernel) / stride + 1,
                )
            }
            Padding::Same => {
                let pad = |n: usize| ((n.div_ceil(stride) - 1) * stride + kernel).saturating_sub(n);
                (
                    pad(height) / 2,
                    pad(width) / 2,
                    height.div_ceil(stride),
                    width.div_ceil(stride),
                )
            }
        };
        let geometry = im2col::Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        Ok(im2col::conv2d(x, &self.weight, &self.bias, geometry)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Output side of a "same"-padded stride-2 convolution.
pub fn same_stride2(n: usize) -> usize {
    n.div_ceil(2)
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn expect_channels(x: &Tensor, channels: usize, what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != channels {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects [B, {channels}, H, W], got {dims:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_lookup_respects_component_boundaries() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = seeded_rng(0, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.sub("g_r").zeros("w", &[1]).unwrap();
        pb.sub("g_r_prime").zeros("w", &[1]).unwrap();
        assert_eq!(store.with_prefix("g_r").count(), 1);
        assert_eq!(store.with_prefix("g_r_prime").count(), 1);
    }

    #[test]
    fn same_padding_halves_with_ceiling() {
        let mut rng = seeded_rng(1, 0);
        let mut pb = ParamBuilder::frozen(&mut rng, Device::Cpu, DType::F32);
        let conv = Conv2d::new(&mut pb, 2, 3, 4, 2, Padding::Same).unwrap();
        for n in [1usize, 2, 3, 5, 24, 25] {
            let x = Tensor::zeros((1, 2, n, n), DType::F32, &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            assert_eq!(y.dims(), &[1, 3, same_stride2(n), same_stride2(n)]);
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = seeded_rng(0, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.zeros("a", &[1]).unwrap();
        assert!(pb.zeros("a", &[1]).is_err());
    }
}

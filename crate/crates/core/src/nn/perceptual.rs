use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{expect_channels, seeded_rng, Conv2d, Padding, ParamBuilder};
use crate::error::{Error, Result};

/// Layer names of the VGG-16 `features` trunk up to the third block, in order.
///
/// Index `i` matches torchvision's `features.{i}` module.
pub const VGG16_LAYERS: &[&str] = &[
    "conv1_1", "relu1_1", "conv1_2", "relu1_2", "pool1", //
    "conv2_1", "relu2_1", "conv2_2", "relu2_2", "pool2", //
    "conv3_1", "relu3_1", "conv3_2", "relu3_2", "conv3_3", "relu3_3",
];

const VGG16_CONV_CHANNELS: &[(usize, usize, usize)] = &[
    // (features index, in, out)
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Pretrained VGG-16 trunk loaded from a safetensors file with torchvision key names.
    Vgg16 {
        #[serde(default)]
        weights: Option<PathBuf>,
        #[serde(default = "default_vgg_layer")]
        layer: String,
    },
    /// Fixed random two-layer conv net, reproducible from its seed.
    Surrogate {
        #[serde(default = "default_surrogate_seed")]
        seed: u64,
        #[serde(default = "default_surrogate_channels")]
        channels: usize,
    },
    /// Features are the pixels themselves.
    Identity,
}

fn default_vgg_layer() -> String {
    "relu2_2".into()
}

fn default_surrogate_seed() -> u64 {
    0x5eed
}

fn default_surrogate_channels() -> usize {
    8
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Surrogate {
            seed: default_surrogate_seed(),
            channels: default_surrogate_channels(),
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv2d),
    Relu,
    Pool,
}

/// Frozen feature extractor for the perceptual losses.
///
/// Weights are plain tensors, never registered as trainable parameters; gradients
/// flow through to the input only.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    normalize: bool,
}

impl FeatureExtractor {
    pub fn from_config(cfg: &BackboneConfig, device: &Device, dtype: DType) -> Result<Self> {
        match cfg {
            BackboneConfig::Identity => Ok(Self::identity()),
            BackboneConfig::Surrogate { seed, channels } => Self::surrogate(*seed, *channels, device, dtype),
            BackboneConfig::Vgg16 { weights, layer } => {
                let path = weights
                    .as_ref()
                    .ok_or_else(|| Error::BackboneUnavailable("no weight file configured".into()))?;
                if !path.is_file() {
                    return Err(Error::BackboneUnavailable(format!("{} not found", path.display())));
                }
                let tensors = candle_core::safetensors::load(path, device)
                    .map_err(|e| Error::BackboneUnavailable(format!("{}: {e}", path.display())))?;
                Self::vgg16(&tensors, layer, dtype)
            }
        }
    }

    pub fn identity() -> Self {
        Self {
            stages: Vec::new(),
            normalize: false,
        }
    }

    pub fn surrogate(seed: u64, channels: usize, device: &Device, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed, 7);
        let mut pb = ParamBuilder::frozen(&mut rng, device.clone(), dtype);
        let c1 = Conv2d::new(&mut pb.sub("conv1"), 3, channels, 3, 1, Padding::Fixed(1))?;
        let c2 = Conv2d::new(&mut pb.sub("conv2"), channels, channels, 3, 1, Padding::Fixed(1))?;
        Ok(Self {
            stages: vec![Stage::Conv(c1), Stage::Relu, Stage::Conv(c2), Stage::Relu],
            normalize: false,
        })
    }

    /// VGG-16 trunk truncated after `layer`, from torchvision-named tensors
    /// (`features.{i}.weight`, `features.{i}.bias`).
    pub fn vgg16(tensors: &std::collections::HashMap<String, Tensor>, layer: &str, dtype: DType) -> Result<Self> {
        let last = VGG16_LAYERS
            .iter()
            .position(|l| *l == layer)
            .ok_or_else(|| Error::Config(format!("unknown VGG-16 layer `{layer}`; known: {VGG16_LAYERS:?}")))?;
        let mut stages = Vec::with_capacity(last + 1);
        for (i, name) in VGG16_LAYERS.iter().enumerate().take(last + 1) {
            let stage = if name.starts_with("conv") {
                let &(_, in_ch, out_ch) = VGG16_CONV_CHANNELS
                    .iter()
                    .find(|(idx, _, _)| *idx == i)
                    .expect("conv layer index table is complete");
                let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                    let key = format!("features.{i}.{suffix}");
                    let t = tensors
                        .get(&key)
                        .ok_or_else(|| Error::BackboneUnavailable(format!("missing tensor {key}")))?;
                    if t.dims() != shape {
                        return Err(Error::BackboneUnavailable(format!(
                            "{key} has shape {:?}, expected {shape:?}",
                            t.dims()
                        )));
                    }
                    Ok(t.to_dtype(dtype)?)
                };
                let w = fetch("weight", &[out_ch, in_ch, 3, 3])?;
                let b = fetch("bias", &[out_ch])?;
                Stage::Conv(Conv2d::from_tensors(w, b, 1, Padding::Fixed(1)))
            } else if name.starts_with("relu") {
                Stage::Relu
            } else {
                Stage::Pool
            };
            stages.push(stage);
        }
        Ok(Self {
            stages,
            normalize: true,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.stages.is_empty() && !self.normalize
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "feature extractor")?;
        let mut y = if self.normalize {
            let mean = Tensor::new(&IMAGENET_MEAN, x.device())?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            let std = Tensor::new(&IMAGENET_STD, x.device())?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            x.broadcast_sub(&mean)?.broadcast_div(&std)?
        } else {
            x.clone()
        };
        for stage in &self.stages {
            y = match stage {
                Stage::Conv(c) => c.forward(&y)?,
                Stage::Relu => y.relu()?,
                Stage::Pool => y.max_pool2d(2)?,
            };
        }
        Ok(y)
    }
}

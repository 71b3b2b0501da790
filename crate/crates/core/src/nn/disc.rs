use candle_core::Tensor;

use super::{expect_channels, leaky_relu, same_stride2, sigmoid, Conv2d, ModelConfig, Padding, ParamBuilder};
use crate::error::{Error, Result};

/// Per-scale sigmoid score maps, finest scale first.
#[derive(Debug, Clone)]
pub struct DiscScores(pub Vec<Tensor>);

impl DiscScores {
    pub fn single(map: Tensor) -> Self {
        Self(vec![map])
    }

    pub fn scales(&self) -> usize {
        self.0.len()
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.0
    }
}

/// Stride-2 convolutions (kernel 4, "same" padding) with leaky ReLU, sigmoid on the last.
#[derive(Debug, Clone)]
pub struct DiscStack {
    convs: Vec<Conv2d>,
}

impl DiscStack {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, base: usize, layers: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        let mut ch = in_ch;
        for i in 0..layers {
            let out = if i + 1 == layers { 1 } else { base << i.min(3) };
            convs.push(Conv2d::new(
                &mut pb.sub(format!("conv{i}")),
                ch,
                out,
                4,
                2,
                Padding::Same,
            )?);
            ch = out;
        }
        Ok(Self { convs })
    }

    pub fn layers(&self) -> usize {
        self.convs.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            y = if i == last { sigmoid(&y)? } else { leaky_relu(&y, 0.2)? };
        }
        Ok(y)
    }
}

/// Factor-2 box filter as a fixed depthwise convolution (kept exact under backprop for odd sizes).
fn downsample2(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let kernel = Tensor::full(0.25f64, (c, 1, 2, 2), x.device())?.to_dtype(x.dtype())?;
    Ok(x.conv2d(&kernel, 0, 2, 1, c)?)
}

/// Smallest full-resolution side accepted by a discriminator with `scales` pyramid levels.
///
/// The coarsest level must be at least `2^(layers-1)` pixels so every stride-2
/// layer but the last still halves a side larger than one.
pub fn min_disc_input(scales: usize, layers: usize) -> usize {
    (1usize << layers.saturating_sub(1)) << scales.saturating_sub(1)
}

/// Independent discriminators applied to an average-pooled image pyramid.
#[derive(Debug, Clone)]
pub struct MultiScaleDisc {
    stacks: Vec<DiscStack>,
    layers: usize,
}

impl MultiScaleDisc {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let stacks = (0..cfg.disc_scales)
            .map(|s| {
                DiscStack::new(
                    &mut pb.sub(format!("scale{s}")),
                    3,
                    cfg.disc_base_channels,
                    cfg.disc_layers_per_scale,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stacks,
            layers: cfg.disc_layers_per_scale,
        })
    }

    pub fn scales(&self) -> usize {
        self.stacks.len()
    }

    /// Spatial side of each score map for a square input of side `n`.
    pub fn score_sizes(&self, n: usize) -> Vec<usize> {
        (0..self.scales())
            .map(|s| (0..self.layers).fold(n >> s, |m, _| same_stride2(m)))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscScores> {
        expect_channels(x, 3, "discriminator")?;
        let (_, _, h, w) = x.dims4()?;
        let min_size = min_disc_input(self.scales(), self.layers);
        let coarsest = 1usize << (self.layers - 1);
        let shift = self.scales() - 1;
        if (h >> shift) < coarsest || (w >> shift) < coarsest {
            return Err(Error::DiscInputTooSmall {
                height: h,
                width: w,
                scales: self.scales(),
                layers: self.layers,
                min_size,
            });
        }
        let mut level = x.clone();
        let mut maps = Vec::with_capacity(self.scales());
        for (s, stack) in self.stacks.iter().enumerate() {
            if s > 0 {
                level = downsample2(&level)?;
            }
            maps.push(stack.forward(&level)?);
        }
        Ok(DiscScores(maps))
    }
}

/// Judges `(rainy, derained)` pairs through a single 6-channel stack.
#[derive(Debug, Clone)]
pub struct PairedDisc {
    stack: DiscStack,
}

impl PairedDisc {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            stack: DiscStack::new(pb, 6, cfg.disc_base_channels, cfg.disc_layers_per_scale)?,
        })
    }

    pub fn forward(&self, rainy: &Tensor, derained: &Tensor) -> Result<DiscScores> {
        expect_channels(rainy, 3, "paired discriminator (rainy)")?;
        expect_channels(derained, 3, "paired discriminator (derained)")?;
        if rainy.dims() != derained.dims() {
            return Err(Error::ShapeMismatch(format!(
                "paired discriminator: {:?} vs {:?}",
                rainy.dims(),
                derained.dims()
            )));
        }
        let pair = Tensor::cat(&[rainy, derained], 1)?;
        Ok(DiscScores::single(self.stack.forward(&pair)?))
    }
}

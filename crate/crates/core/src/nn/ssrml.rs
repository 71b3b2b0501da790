use candle_core::{DType, Tensor};

use super::{expect_channels, sigmoid, Conv2d, ModelConfig, Padding, ParamBuilder};
use crate::error::Result;

/// Conv-ReLU-Conv-ReLU with an identity skip.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.sub("conv1"), channels, channels, 3, 1, Padding::Fixed(1))?,
            conv2: Conv2d::new(&mut pb.sub("conv2"), channels, channels, 3, 1, Padding::Fixed(1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        Ok((x + y)?)
    }
}

/// Convolutional LSTM cell; gates come from one 3x3 convolution over `[input, hidden]`.
#[derive(Debug, Clone)]
struct ConvLstm {
    gates: Conv2d,
    channels: usize,
}

impl ConvLstm {
    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gates: Conv2d::new(
                &mut pb.sub("gates"),
                2 * channels,
                4 * channels,
                3,
                1,
                Padding::Fixed(1),
            )?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.gates.forward(&Tensor::cat(&[x, h], 1)?)?;
        let n = self.channels;
        let input = sigmoid(&g.narrow(1, 0, n)?)?;
        let forget = sigmoid(&g.narrow(1, n, n)?)?;
        let cell = g.narrow(1, 2 * n, n)?.tanh()?;
        let output = sigmoid(&g.narrow(1, 3 * n, n)?)?;
        let c = ((forget * c)? + (input * cell)?)?;
        let h = (output * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Recurrent attentive rain-mask learner.
///
/// Each iteration reads the image together with the previous mask, refines a
/// feature map through residual blocks and a convolutional LSTM, and emits a
/// new single-channel mask through a sigmoid. The first iteration sees a flat
/// 0.5 mask; the last mask is returned.
#[derive(Debug, Clone)]
pub struct Ssrml {
    head: Conv2d,
    blocks: Vec<ResBlock>,
    lstm: ConvLstm,
    mask: Conv2d,
    channels: usize,
    iterations: usize,
}

impl Ssrml {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.ssrml_channels;
        let head = Conv2d::new(&mut pb.sub("head"), 4, ch, 3, 1, Padding::Fixed(1))?;
        let blocks = (0..cfg.ssrml_blocks)
            .map(|i| ResBlock::new(&mut pb.sub(format!("block{i}")), ch))
            .collect::<Result<_>>()?;
        let lstm = ConvLstm::new(&mut pb.sub("lstm"), ch)?;
        let mask = Conv2d::new(&mut pb.sub("mask"), ch, 1, 3, 1, Padding::Fixed(1))?;
        Ok(Self {
            head,
            blocks,
            lstm,
            mask,
            channels: ch,
            iterations: cfg.ssrml_iterations,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Same parameters, different number of recurrent refinements.
    pub fn with_iterations(&self, iterations: usize) -> Self {
        Self {
            iterations: iterations.max(1),
            ..self.clone()
        }
    }

    /// `[B, 3, H, W]` image batch to `[B, 1, H, W]` mask batch in `(0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "rain-mask learner")?;
        let (b, _, h, w) = x.dims4()?;
        let dtype: DType = x.dtype();
        let mut mask = Tensor::full(0.5f64, (b, 1, h, w), x.device())?.to_dtype(dtype)?;
        let mut hidden = Tensor::zeros((b, self.channels, h, w), dtype, x.device())?;
        let mut cell = hidden.clone();
        for _ in 0..self.iterations {
            let input = Tensor::cat(&[x, &mask], 1)?;
            let mut f = self.head.forward(&input)?.relu()?;
            for block in &self.blocks {
                f = block.forward(&f)?;
            }
            let (h_next, c_next) = self.lstm.forward(&f, &hidden, &cell)?;
            hidden = h_next;
            cell = c_next;
            mask = sigmoid(&self.mask.forward(&hidden)?)?;
        }
        Ok(mask)
    }
}

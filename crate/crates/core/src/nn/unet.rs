use candle_core::Tensor;

use super::{expect_channels, sigmoid, Conv2d, ModelConfig, Padding, ParamBuilder, Ssrml};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(&mut pb.sub("conv1"), in_ch, out_ch, 3, 1, Padding::Fixed(1))?,
            b: Conv2d::new(&mut pb.sub("conv2"), out_ch, out_ch, 3, 1, Padding::Fixed(1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.a.forward(x)?.relu()?;
        Ok(self.b.forward(&y)?.relu()?)
    }
}

/// Nearest-neighbour x2 upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
struct UpBlock {
    reduce: Conv2d,
    fuse: DoubleConv,
}

impl UpBlock {
    fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&mut pb.sub("reduce"), in_ch, out_ch, 3, 1, Padding::Fixed(1))?,
            fuse: DoubleConv::new(&mut pb.sub("fuse"), 2 * out_ch, out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = skip.dims4()?;
        let up = x.upsample_nearest2d(h, w)?;
        let up = self.reduce.forward(&up)?.relu()?;
        self.fuse.forward(&Tensor::cat(&[&up, skip], 1)?)
    }
}

/// Encoder-decoder with skip connections over `(mask, image)`.
///
/// Input is the channel concatenation `[mask, image]` (4 channels); output is a
/// 3-channel image in `(0, 1)`. The output head starts at zero, so a fresh
/// network predicts a flat 0.5 image.
#[derive(Debug, Clone)]
pub struct UNet {
    down: Vec<DoubleConv>,
    up: Vec<UpBlock>,
    head: Conv2d,
    depth: usize,
}

impl UNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let base = cfg.unet_base_channels;
        let depth = cfg.unet_depth;
        let width = |level: usize| base << level;
        let mut down = Vec::with_capacity(depth + 1);
        for level in 0..=depth {
            let in_ch = if level == 0 { 4 } else { width(level - 1) };
            down.push(DoubleConv::new(
                &mut pb.sub(format!("down{level}")),
                in_ch,
                width(level),
            )?);
        }
        let mut up = Vec::with_capacity(depth);
        for level in (0..depth).rev() {
            up.push(UpBlock::new(
                &mut pb.sub(format!("up{level}")),
                width(level + 1),
                width(level),
            )?);
        }
        let head = Conv2d::zeroed(&mut pb.sub("head"), base, 3, 1)?;
        Ok(Self { down, up, head, depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn forward(&self, mask: &Tensor, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "generator image input")?;
        expect_channels(mask, 1, "generator mask input")?;
        let (b, _, h, w) = x.dims4()?;
        let (mb, _, mh, mw) = mask.dims4()?;
        if (b, h, w) != (mb, mh, mw) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} is not aligned with image {:?}",
                mask.dims(),
                x.dims()
            )));
        }
        let multiple = 1 << self.depth;
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::ShapeMismatch(format!(
                "generator input {h}x{w} must be a multiple of {multiple}; reflect-pad first"
            )));
        }
        let mut skips = Vec::with_capacity(self.depth);
        let mut y = Tensor::cat(&[mask, x], 1)?;
        for (level, block) in self.down.iter().enumerate() {
            if level > 0 {
                y = y.max_pool2d(2)?;
            }
            y = block.forward(&y)?;
            if level < self.depth {
                skips.push(y.clone());
            }
        }
        for block in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            y = block.forward(&y, &skip)?;
        }
        sigmoid(&self.head.forward(&y)?)
    }
}

/// Re-raining generator: its own mask learner followed by a U-net.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    mask: Ssrml,
    unet: UNet,
}

impl Reconstructor {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            mask: Ssrml::new(&mut pb.sub("mask"), cfg)?,
            unet: UNet::new(&mut pb.sub("unet"), cfg)?,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let m = self.mask.forward(y)?;
        self.unet.forward(&m, y)
    }
}

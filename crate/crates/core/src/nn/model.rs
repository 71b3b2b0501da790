use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    seeded_rng, DiscScores, ModelConfig, MultiScaleDisc, PairedDisc, ParamBuilder, ParamStore, Reconstructor, Ssrml,
    UNet,
};
use crate::error::Result;
use crate::image::{reflect_index, ImageTensor};

/// Parameter partition; each group is a dotted name prefix in the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Ssrml,
    GenSynthetic,
    GenReal,
    Reconstructor,
    DiscSynthetic,
    DiscReal,
    DiscPaired,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Ssrml,
        ParamGroup::GenSynthetic,
        ParamGroup::GenReal,
        ParamGroup::Reconstructor,
        ParamGroup::DiscSynthetic,
        ParamGroup::DiscReal,
        ParamGroup::DiscPaired,
    ];

    pub const GENERATORS: [ParamGroup; 4] = [
        ParamGroup::Ssrml,
        ParamGroup::GenSynthetic,
        ParamGroup::GenReal,
        ParamGroup::Reconstructor,
    ];

    pub const DISCRIMINATORS: [ParamGroup; 3] =
        [ParamGroup::DiscSynthetic, ParamGroup::DiscReal, ParamGroup::DiscPaired];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Ssrml => "ssrml",
            ParamGroup::GenSynthetic => "g_s",
            ParamGroup::GenReal => "g_r",
            ParamGroup::Reconstructor => "g_r_prime",
            ParamGroup::DiscSynthetic => "d_s",
            ParamGroup::DiscReal => "d_r",
            ParamGroup::DiscPaired => "d_p",
        }
    }

    pub fn is_discriminator(self) -> bool {
        Self::DISCRIMINATORS.contains(&self)
    }

    fn stream(self) -> u64 {
        Self::ALL.iter().position(|g| *g == self).unwrap() as u64 + 1
    }
}

/// Which derain generator serves inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorChoice {
    /// The generator trained on paired synthetic data.
    #[default]
    Synthetic,
    /// The generator trained on real rainy images.
    Real,
}

/// All networks of the semi-supervised deraining model.
///
/// There is exactly one rain-mask learner; both the synthetic and the real
/// branch call it, so gradients from both processes land on the same tensors.
/// Each component draws its initial weights from its own seeded stream.
#[derive(Debug, Clone)]
pub struct DerainModel {
    config: ModelConfig,
    store: ParamStore,
    pub ssrml: Ssrml,
    pub g_s: UNet,
    pub g_r: UNet,
    pub g_r_prime: Reconstructor,
    pub d_s: MultiScaleDisc,
    pub d_r: MultiScaleDisc,
    pub d_p: PairedDisc,
}

impl DerainModel {
    pub fn new(config: &ModelConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(device.clone(), dtype);
        macro_rules! build {
            ($group:expr, $ctor:expr) => {{
                let mut rng = seeded_rng(seed, $group.stream());
                let mut pb = ParamBuilder::new(&mut store, &mut rng);
                let mut pb = pb.sub($group.prefix());
                $ctor(&mut pb, config)?
            }};
        }
        let ssrml = build!(ParamGroup::Ssrml, Ssrml::new);
        let g_s = build!(ParamGroup::GenSynthetic, UNet::new);
        let g_r = build!(ParamGroup::GenReal, UNet::new);
        let g_r_prime = build!(ParamGroup::Reconstructor, Reconstructor::new);
        let d_s = build!(ParamGroup::DiscSynthetic, MultiScaleDisc::new);
        let d_r = build!(ParamGroup::DiscReal, MultiScaleDisc::new);
        let d_p = build!(ParamGroup::DiscPaired, PairedDisc::new);
        Ok(Self {
            config: config.clone(),
            store,
            ssrml,
            g_s,
            g_r,
            g_r_prime,
            d_s,
            d_r,
            d_p,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Runs `f` on `x` reflect-padded to the U-net multiple and crops every output back.
    fn padded<const N: usize>(
        &self,
        x: &Tensor,
        f: impl FnOnce(&Tensor) -> Result<[Tensor; N]>,
    ) -> Result<[Tensor; N]> {
        let (_, _, h, w) = x.dims4()?;
        let padded = reflect_pad(x, self.config.size_multiple())?;
        if padded.dims() == x.dims() {
            return f(x);
        }
        let outs = f(&padded)?;
        let mut cropped = Vec::with_capacity(N);
        for t in outs {
            cropped.push(t.narrow(2, 0, h)?.narrow(3, 0, w)?);
        }
        Ok(cropped.try_into().expect("length preserved"))
    }

    /// `(m_s, ỹ_s)` for a synthetic batch of any spatial size.
    pub fn derain_synthetic(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let [mask, y] = self.padded(x, |x| {
            let mask = self.ssrml.forward(x)?;
            let y = self.g_s.forward(&mask, x)?;
            Ok([mask, y])
        })?;
        Ok((mask, y))
    }

    /// `(m_r, ỹ_r)` for a real batch of any spatial size.
    pub fn derain_real(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let [mask, y] = self.padded(x, |x| {
            let mask = self.ssrml.forward(x)?;
            let y = self.g_r.forward(&mask, x)?;
            Ok([mask, y])
        })?;
        Ok((mask, y))
    }

    pub fn rerain(&self, y: &Tensor) -> Result<Tensor> {
        let [x] = self.padded(y, |y| Ok([self.g_r_prime.forward(y)?]))?;
        Ok(x)
    }

    pub fn score_synthetic(&self, x: &Tensor) -> Result<DiscScores> {
        self.d_s.forward(x)
    }

    pub fn score_real(&self, x: &Tensor) -> Result<DiscScores> {
        self.d_r.forward(x)
    }

    pub fn score_pair(&self, rainy: &Tensor, derained: &Tensor) -> Result<DiscScores> {
        self.d_p.forward(rainy, derained)
    }

    /// Derains a whole image of any size: reflect-pad to the U-net multiple, run, crop back.
    pub fn derain_image(&self, img: &ImageTensor, which: GeneratorChoice) -> Result<ImageTensor> {
        if img.channels() != 3 {
            return Err(crate::error::Error::InvalidImage(format!(
                "deraining needs 3 channels, got {}",
                img.channels()
            )));
        }
        let x = img.to_tensor(self.device(), self.dtype())?;
        let (_, y) = match which {
            GeneratorChoice::Synthetic => self.derain_synthetic(&x)?,
            GeneratorChoice::Real => self.derain_real(&x)?,
        };
        ImageTensor::from_tensor(&y.detach())
    }
}

/// Mirror-pads the bottom and right of a `[B, C, H, W]` tensor up to a multiple of `multiple`.
pub fn reflect_pad(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let mut y = x.clone();
    for dim in [2, 3] {
        let n = y.dim(dim)?;
        let target = n.div_ceil(multiple) * multiple;
        if target != n {
            let idx: Vec<u32> = (0..target).map(|i| reflect_index(i, n) as u32).collect();
            let idx = Tensor::new(idx.as_slice(), y.device())?;
            y = y.index_select(&idx, dim)?;
        }
    }
    Ok(y)
}

/// Anything that maps a rainy image to a derained one.
pub trait Derainer {
    fn derain(&self, img: &ImageTensor) -> Result<ImageTensor>;
}

/// Returns its input; the reference pipeline for metric sanity checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDerainer;

impl Derainer for IdentityDerainer {
    fn derain(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

impl Derainer for (&DerainModel, GeneratorChoice) {
    fn derain(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.0.derain_image(img, self.1)
    }
}

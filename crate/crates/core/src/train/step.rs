use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::config::{lr_schedule, TrainConfig};
use crate::data::{PairedBatch, UnpairedBatch};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, disc_loss, gen_adv_loss, perceptual_loss, scalar, ssim_loss, supervised_loss, total_loss, tv_loss,
    unsupervised_loss, LossBreakdown,
};
use crate::nn::{seeded_rng, DerainModel, FeatureExtractor, ParamGroup};
use crate::optim::{Adam, PendingUpdate};

/// Observation points inside one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// Generator outputs of one step; generator weights do not change during the
/// discriminator phase, so both phases share them.
struct Forward {
    ys: Tensor,
    yr: Option<Tensor>,
}

/// Generator-side objective of one batch.
pub struct Objective {
    pub supervised: Tensor,
    /// Unweighted unsupervised loss; `None` when the process is off.
    pub unsupervised: Option<Tensor>,
    /// `supervised + w_unsup * unsupervised`.
    pub total: Tensor,
    /// Generator terms; the discriminator entries are zero.
    pub breakdown: LossBreakdown,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub model: DerainModel,
    backbone: FeatureExtractor,
    optims: BTreeMap<ParamGroup, Adam>,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let model = DerainModel::new(&cfg.model, cfg.seed, device, dtype)?;
        let backbone = if cfg.ablations.use_perceptual {
            FeatureExtractor::from_config(&cfg.perceptual, device, dtype)?
        } else {
            FeatureExtractor::identity()
        };
        let optims = ParamGroup::ALL
            .iter()
            .map(|&g| Ok((g, Adam::new(model.params(), g.prefix(), cfg.adam)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            backbone,
            optims,
            epoch: 0,
            global_step: 0,
            rng: seeded_rng(cfg.seed, 0),
        })
    }

    pub fn optimizer(&self, group: ParamGroup) -> &Adam {
        &self.optims[&group]
    }

    pub(crate) fn optimizer_mut(&mut self, group: ParamGroup) -> &mut Adam {
        self.optims.get_mut(&group).expect("every group has an optimizer")
    }

    pub fn dtype(&self) -> DType {
        self.model.dtype()
    }

    /// Order-sensitive hash of a group's parameter values.
    pub fn param_digest(&self, group: ParamGroup) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for (name, var) in self.model.params().with_prefix(group.prefix()) {
            name.hash(&mut h);
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    fn forward(&self, paired: &PairedBatch, unpaired: Option<&UnpairedBatch>) -> Result<Forward> {
        let (_, ys) = self.model.derain_synthetic(&paired.rainy)?;
        let yr = match unpaired {
            Some(u) => Some(self.model.derain_real(&u.rainy)?.1),
            None => None,
        };
        Ok(Forward { ys, yr })
    }

    /// Generator objective on fresh forwards, for inspection and gradient tests.
    pub fn objective(
        &self,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
    ) -> Result<Objective> {
        let unpaired = active_unpaired(unpaired, cfg)?;
        let fwd = self.forward(paired, unpaired)?;
        self.generator_objective(&fwd, paired, unpaired, cfg)
    }

    fn generator_objective(
        &self,
        fwd: &Forward,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
    ) -> Result<Objective> {
        let w = &cfg.weights;
        let ab = &cfg.ablations;
        let m = &self.model;
        let mut b = LossBreakdown::default();

        let adv_s = gen_adv_loss(&m.score_synthetic(&fwd.ys)?)?;
        let mut adv = adv_s.clone();
        if ab.use_paired_disc {
            let adv_pair = gen_adv_loss(&m.score_pair(&paired.rainy, &fwd.ys)?)?;
            b.adv_pair = scalar(&adv_pair)?;
            adv = (adv + adv_pair)?;
        }
        b.adv_super = scalar(&adv)?;
        let ssim = ssim_loss(&paired.clean, &fwd.ys)?;
        b.ssim = scalar(&ssim)?;
        let mut sup = ((adv * w.adv_super)? + (ssim * w.ssim)?)?;
        if ab.use_perceptual {
            let per = perceptual_loss(&self.backbone, &paired.clean, &fwd.ys)?;
            b.per_super = scalar(&per)?;
            sup = (sup + (per * w.per_super)?)?;
        }
        b.super_total = supervised_loss(&b.supervised_terms(), w)?;

        let unsup = match (unpaired, &fwd.yr) {
            (Some(u), Some(yr)) => {
                let adv = gen_adv_loss(&m.score_real(yr)?)?;
                b.adv_unsup = scalar(&adv)?;
                let cc = cycle_loss(&u.rainy, &m.rerain(yr)?)?;
                b.cc = scalar(&cc)?;
                let mut l = ((adv * w.adv_unsup)? + (cc * w.cc)?)?;
                if ab.use_perceptual {
                    let per = perceptual_loss(&self.backbone, &u.rainy, yr)?;
                    b.per_unsup = scalar(&per)?;
                    l = (l + (per * w.per_unsup)?)?;
                }
                if ab.use_tv {
                    let tv = tv_loss(yr)?;
                    b.tv = scalar(&tv)?;
                    l = (l + (tv * w.tv)?)?;
                }
                b.unsup_total = unsupervised_loss(&b.unsupervised_terms(), w)?;
                Some(l)
            }
            _ => None,
        };
        b.total = total_loss(b.super_total, b.unsup_total, w);
        b.check_finite()?;
        let total = match &unsup {
            Some(l) => (&sup + (l * w.unsup)?)?,
            None => sup.clone(),
        };
        Ok(Objective {
            supervised: sup,
            unsupervised: unsup,
            total,
            breakdown: b,
        })
    }

    fn lr(&self, group: ParamGroup, cfg: &TrainConfig) -> f64 {
        lr_schedule(self.epoch, cfg.base_lr(group), cfg)
    }

    /// Applies one Adam step to each listed group, all or nothing.
    fn update(&mut self, groups: &[ParamGroup], loss: &Tensor, cfg: &TrainConfig) -> Result<()> {
        let grads = loss.backward()?;
        let lrs: BTreeMap<ParamGroup, f64> = groups.iter().map(|&g| (g, self.lr(g, cfg))).collect();
        let pending = self
            .optims
            .iter_mut()
            .filter(|(g, _)| lrs.contains_key(g))
            .map(|(g, adam)| adam.prepare(&grads, lrs[g]))
            .collect::<Result<Vec<PendingUpdate>>>()?;
        for p in pending {
            p.commit()?;
        }
        Ok(())
    }

    fn discriminator_phase(
        &mut self,
        fwd: &Forward,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
        b: &mut LossBreakdown,
    ) -> Result<()> {
        let m = &self.model;
        let ys = fwd.ys.detach();
        let d_s = disc_loss(&m.score_synthetic(&paired.clean)?, &m.score_synthetic(&ys)?)?;
        b.d_s = scalar(&d_s)?;
        let mut total = d_s;
        let mut groups = vec![ParamGroup::DiscSynthetic];
        if cfg.ablations.use_paired_disc {
            let d_p = disc_loss(
                &m.score_pair(&paired.rainy, &paired.clean)?,
                &m.score_pair(&paired.rainy, &ys)?,
            )?;
            b.d_p = scalar(&d_p)?;
            total = (total + d_p)?;
            groups.push(ParamGroup::DiscPaired);
        }
        if let (Some(u), Some(yr)) = (unpaired, &fwd.yr) {
            let d_r = disc_loss(&m.score_real(&u.fake_label)?, &m.score_real(&yr.detach())?)?;
            b.d_r = scalar(&d_r)?;
            total = (total + d_r)?;
            groups.push(ParamGroup::DiscReal);
        }
        for (name, v) in [("d_s", b.d_s), ("d_p", b.d_p), ("d_r", b.d_r)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        self.update(&groups, &total, cfg)
    }

    fn generator_phase(
        &mut self,
        fwd: &Forward,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
        b: &mut LossBreakdown,
    ) -> Result<()> {
        let obj = self.generator_objective(fwd, paired, unpaired, cfg)?;
        let mut groups = vec![ParamGroup::Ssrml, ParamGroup::GenSynthetic];
        if unpaired.is_some() {
            groups.extend([ParamGroup::GenReal, ParamGroup::Reconstructor]);
        }
        let (d_s, d_p, d_r) = (b.d_s, b.d_p, b.d_r);
        *b = LossBreakdown {
            d_s,
            d_p,
            d_r,
            ..obj.breakdown
        };
        self.update(&groups, &obj.total, cfg)
    }

    pub fn train_step(
        &mut self,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
    ) -> Result<LossBreakdown> {
        self.train_step_observed(paired, unpaired, cfg, |_, _| {})
    }

    /// One discriminator phase (repeated `disc_updates_per_step` times) and one
    /// generator phase; `observe` runs after each.
    ///
    /// On error every parameter and optimizer moment is restored.
    pub fn train_step_observed(
        &mut self,
        paired: &PairedBatch,
        unpaired: Option<&UnpairedBatch>,
        cfg: &TrainConfig,
        mut observe: impl FnMut(Phase, &TrainState),
    ) -> Result<LossBreakdown> {
        let unpaired = active_unpaired(unpaired, cfg)?;
        let fwd = self.forward(paired, unpaired)?;
        let saved_params: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .filter(|(name, _)| {
                ParamGroup::DISCRIMINATORS
                    .iter()
                    .any(|g| name.starts_with(&format!("{}.", g.prefix())))
            })
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let saved_optims = self.optims.clone();
        let mut b = LossBreakdown::default();
        let mut run = |state: &mut Self| -> Result<()> {
            for _ in 0..cfg.disc_updates_per_step {
                state.discriminator_phase(&fwd, paired, unpaired, cfg, &mut b)?;
                observe(Phase::Discriminator, state);
            }
            state.generator_phase(&fwd, paired, unpaired, cfg, &mut b)?;
            observe(Phase::Generator, state);
            Ok(())
        };
        if let Err(e) = run(self) {
            for (name, t) in &saved_params {
                self.model.params().get(name).expect("saved from this store").set(t)?;
            }
            self.optims = saved_optims;
            return Err(e);
        }
        self.global_step += 1;
        Ok(b)
    }
}

fn active_unpaired<'a>(unpaired: Option<&'a UnpairedBatch>, cfg: &TrainConfig) -> Result<Option<&'a UnpairedBatch>> {
    if !cfg.ablations.use_unsupervised {
        return Ok(None);
    }
    match unpaired {
        Some(u) => Ok(Some(u)),
        None => Err(Error::Config(
            "the unsupervised process is enabled but no real batch was supplied \
             (set ablations.use_unsupervised = false for supervised-only training)"
                .into(),
        )),
    }
}

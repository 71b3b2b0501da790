//! Adaptive-moment optimiser over one parameter group.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1) and eps be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam state for the parameters sharing one name prefix.
///
/// Parameters without a gradient in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

/// Update computed by [`Adam::prepare`] but not yet written to the parameters.
pub struct PendingUpdate<'a> {
    adam: &'a mut Adam,
    values: Vec<(String, Tensor, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, prefix: &str, cfg: AdamConfig) -> Result<Self> {
        let slots = store
            .with_prefix(prefix)
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok((
                    name.clone(),
                    Slot {
                        var: var.clone(),
                        m: zeros.clone(),
                        v: zeros,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `(name, m, v)` for every parameter, ordered by name.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.slots.iter().map(|(n, s)| (n, &s.m, &s.v))
    }

    /// Replaces step count and moments; every parameter of the group must be covered.
    pub fn restore(&mut self, steps: u64, moments: &BTreeMap<String, (Tensor, Tensor)>) -> Result<()> {
        for (name, slot) in &self.slots {
            let (m, v) = moments
                .get(name)
                .ok_or_else(|| Error::MissingParam(format!("optimizer moments of {name}")))?;
            for t in [m, v] {
                if t.dims() != slot.m.dims() {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: slot.m.dims().to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
            }
        }
        for (name, slot) in self.slots.iter_mut() {
            let (m, v) = &moments[name];
            slot.m = m.to_dtype(slot.m.dtype())?;
            slot.v = v.to_dtype(slot.v.dtype())?;
        }
        self.steps = steps;
        Ok(())
    }

    /// Computes the next parameter values and moments without applying them.
    pub fn prepare(&mut self, grads: &GradStore, lr: f64) -> Result<PendingUpdate<'_>> {
        let c = self.cfg;
        let t = (self.steps + 1) as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let mut values = Vec::new();
        for (name, slot) in &self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((&v / bias2)?.sqrt()? + c.eps)?;
            let delta = ((&m / bias1)?.div(&denom)? * lr)?;
            let p = (slot.var.as_tensor().detach() - delta)?;
            let check = p.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !check.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("parameter {name}"),
                });
            }
            values.push((name.clone(), p, m, v));
        }
        Ok(PendingUpdate { adam: self, values })
    }

    /// One full step: prepare and commit.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.prepare(grads, lr)?.commit()
    }
}

impl PendingUpdate<'_> {
    pub fn commit(self) -> Result<()> {
        for (name, p, m, v) in self.values {
            let slot = self
                .adam
                .slots
                .get_mut(&name)
                .expect("update built from existing slots");
            slot.var.set(&p)?;
            slot.m = m;
            slot.v = v;
        }
        self.adam.steps += 1;
        Ok(())
    }
}

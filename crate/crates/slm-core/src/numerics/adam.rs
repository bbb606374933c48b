//! Named parameter storage and the Adam optimizer with warmup.

use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// One named parameter: its value and, once backward has run, its gradient.
#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
}

/// Named parameters in a stable (sorted) order, which fixes both the
/// checkpoint layout and the optimizer update order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.entries.insert(name.into(), ParamEntry { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<F>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.all_finite())
    }

    /// Add `grad` into the entry's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<F>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        match &mut entry.grad {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|e| e.grad.as_ref())
            .map(|g| g.squared_norm())
            .sum::<f64>()
            .sqrt()
    }
}

/// Scale all gradients so their global norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, e) in params.iter_mut() {
            if let Some(g) = &mut e.grad {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Linear warmup, then inverse-square-root decay.
    InvSqrtDecay,
    /// Linear warmup, then hold the base rate.
    Constant,
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 9e-5,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::InvSqrtDecay,
        }
    }
}

impl AdamConfig {
    /// `base · min(step/warmup, sqrt(warmup/step))`: linear ramp to the base
    /// rate at `step == warmup`, inverse-square-root decay afterwards
    /// (constant when the schedule says so).
    pub fn effective_lr(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps.max(1) as f64;
        let ramp = step / warmup;
        let decay = match self.schedule {
            LrSchedule::InvSqrtDecay => (warmup / step).sqrt(),
            LrSchedule::Constant => 1.0,
        };
        self.base_lr * ramp.min(decay)
    }
}

/// Adam with bias correction; moment math runs in f64 regardless of the
/// parameter precision.
#[derive(Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every parameter; requires every gradient to be
    /// populated and clears them afterwards.
    pub fn step<F: Scalar>(&mut self, params: &mut ParamSet<F>) -> Result<(), NumericsError> {
        if let Some((name, _)) = params.iter().find(|(_, e)| e.grad.is_none()) {
            return Err(NumericsError::usage(format!(
                "adam step with missing gradient for {name:?}"
            )));
        }
        self.step += 1;
        let lr = self.cfg.effective_lr(self.step);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, entry) in params.iter_mut() {
            let grad = entry.grad.take().expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, &g), (mi, vi)) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.to_f64();
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let upd = p.to_f64() - lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                *p = F::from_f64(upd);
            }
        }
        Ok(())
    }
}

//! Parameter registry and the Adam optimizer.
//!
//! Every trainable tensor lives in a [`ParamSet`] under a stable name; model
//! components hold [`ParamId`] handles. Backward passes accumulate into the
//! co-located `grad` tensors, which the optimizer and the finite-difference
//! checker both read.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// f64 inherent math methods live in std; route through the trait so the
// no_std build resolves them via libm.
#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// Handle to one parameter group inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of parameter groups. Registration order is the
/// canonical parameter order used by checkpoints and gradient checks.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    groups: Vec<ParamGroup<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { groups: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.groups.push(ParamGroup {
            name,
            value: value.with_requires_grad(),
            grad,
            frozen: false,
        });
        ParamId(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.groups[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.groups[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.groups[id.0].grad
    }

    pub fn group(&self, id: ParamId) -> &ParamGroup<T> {
        &self.groups[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.groups.iter().position(|g| g.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup<T>> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup<T>> {
        self.groups.iter_mut()
    }

    /// Adds `delta` into the gradient accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        self.groups[id.0]
            .grad
            .add_scaled(delta, T::one())
            .expect("gradient shape matches parameter shape");
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            g.grad = Tensor::zeros(g.value.shape());
        }
    }

    /// Total number of scalar elements across all non-frozen groups.
    pub fn trainable_len(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| !g.frozen)
            .map(|g| g.value.len())
            .sum()
    }
}

/// Outcome of one optimizer step on a single parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Frozen parameters are never updated; the caller may warn.
    SkippedFrozen,
}

/// Per-parameter Adam state with bias-corrected first/second moments.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam hyperparameters. The defaults mirror the training recipe this
/// model ships with (note the unusually low beta1).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.6,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if !open01(self.beta1) || !open01(self.beta2) {
            return Err(CoreError::Param(format!(
                "adam betas must lie in (0,1): ({}, {})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update on a single parameter group.
pub fn adam_step<T: Real>(
    param: &mut ParamGroup<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: T,
) -> StepOutcome {
    if param.frozen {
        return StepOutcome::SkippedFrozen;
    }
    state.step += 1;
    let b1 = real::<T>(cfg.beta1);
    let b2 = real::<T>(cfg.beta2);
    let eps = real::<T>(cfg.eps);
    let bias1 = T::one() - real::<T>(cfg.beta1.powi(state.step as i32));
    let bias2 = T::one() - real::<T>(cfg.beta2.powi(state.step as i32));
    let n = param.value.len();
    for i in 0..n {
        let g = param.grad.data()[i];
        let m = b1 * state.m.data()[i] + (T::one() - b1) * g;
        let v = b2 * state.v.data()[i] + (T::one() - b2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        let next = param.value.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        param.value.data_mut()[i] = next;
    }
    StepOutcome::Applied
}

/// Adam over a whole [`ParamSet`], one state per group.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub cfg: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let states = params
            .iter()
            .map(|g| AdamState {
                step: 0,
                m: Tensor::zeros(g.value.shape()),
                v: Tensor::zeros(g.value.shape()),
            })
            .collect();
        Ok(Optimizer { cfg, states })
    }

    /// Applies one Adam step to every non-frozen group.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: T) {
        for (group, state) in params.iter_mut().zip(self.states.iter_mut()) {
            adam_step(group, state, &self.cfg, lr);
        }
    }
}

/// Per-step learning rate: linear ramp from `lr / warmup_steps` up to `lr`
/// over `warmup_steps`, constant afterwards. A zero warmup yields `lr`
/// from the first step.
pub fn warmup_lr(step: u64, warmup_steps: u64, lr: f64) -> f64 {
    if warmup_steps == 0 || step + 1 >= warmup_steps {
        lr
    } else {
        lr * (step + 1) as f64 / warmup_steps as f64
    }
}

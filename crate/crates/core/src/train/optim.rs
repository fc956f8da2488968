use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exempt norm scale/shift parameters from weight decay.
    pub no_decay_norm_affine: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            no_decay_norm_affine: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {} is negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One parameter update with momentum and coupled weight decay:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let nv = momentum * v.as_f64() + (g.as_f64() + weight_decay * t.as_f64());
        *v = T::from_f64(nv);
        *t = T::from_f64(t.as_f64() - lr * nv);
    }
}

/// Stochastic gradient descent with per-parameter velocity.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Applies one update; `grads` holds one gradient per parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{}`", p.name)))?;
            p.value.expect_same_shape(g)?;
            let wd = if self.config.no_decay_norm_affine && p.role.is_norm_affine() {
                0.0
            } else {
                self.config.weight_decay
            };
            sgd_update(p.value.data_mut(), g.data(), v.data_mut(), lr, self.config.momentum, wd);
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base_lr` times the product of the
/// multipliers of every milestone whose epoch has been reached.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    /// `(epoch, multiplier)` with strictly increasing epochs (0-based).
    pub milestones: Vec<(usize, f64)>,
}

impl StepSchedule {
    pub fn new(base_lr: f64, milestones: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { base_lr, milestones };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            milestones: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base learning rate {} must be positive",
                self.base_lr
            )));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "milestone epochs must be strictly increasing".into(),
            ));
        }
        if self.milestones.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument("milestone multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.base_lr, |lr, &(_, m)| lr * m)
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a parameter tensor is used for; the optimizer and the parameter
/// accountant both key off this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    ConvWeight,
    LinearWeight,
    LinearBias,
    /// Per-channel scale of a norm layer (`ω`, or `B_ω` under meta norm).
    NormScale,
    /// Per-channel shift of a norm layer (`β`, or `B_β`).
    NormShift,
    /// Shared key-feature encoder `W1`.
    IlmEncoder,
    /// Mean and variance decoders `W2`, `W3`.
    IlmDecoder,
}

impl ParamRole {
    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamRole::NormScale | ParamRole::NormShift)
    }

    pub fn is_ilm(self) -> bool {
        matches!(self, ParamRole::IlmEncoder | ParamRole::IlmDecoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Named parameters in creation order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(ParamRole) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.role))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces the value of the parameter called `name`, keeping its
    /// shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

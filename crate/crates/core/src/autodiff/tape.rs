use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries of the
/// returned vector for inputs that do not may be `None`.
pub trait Backward<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in execution order, which is a topological order of
/// the computation graph. Gradients accumulate across calls to
/// [`Tape::backward`] until [`Tape::zero_grad`].
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var { tape: self.id, index }
    }

    /// Records the result of an operation on `inputs`.
    pub fn record(&mut self, op: impl Backward<T> + 'static, inputs: &[Var], value: Tensor<T>) -> Var {
        for v in inputs {
            assert_eq!(v.tape, self.id, "variable from another tape");
        }
        let requires_grad = self.any_requires_grad(inputs);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push(value, inputs.iter().map(|v| v.index).collect(), op, requires_grad)
    }

    /// Whether gradients flow through any of `vars`; ops use this to skip
    /// saving forward intermediates.
    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.grads[v.index].as_ref()
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    /// Names of the recorded operations in execution order (`leaf` for
    /// inputs and parameters, `const` for nodes without gradient flow).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| match (&n.op, n.inputs.is_empty()) {
                (Some(op), _) => op.name(),
                (None, true) => "leaf",
                (None, false) => "const",
            })
            .collect()
    }

    /// Input indices of node `v`, all strictly smaller than `v.index()`.
    pub fn inputs_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].inputs
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Propagates adjoints from the scalar `loss` and adds `∂loss/∂value`
    /// to the stored gradient of every node that requires one.
    ///
    /// Calling this twice without [`Tape::zero_grad`] doubles every
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.owns(loss) {
            return Err(Error::Autodiff("loss is not recorded on this tape".into()));
        }
        let seed_shape = self.nodes[loss.index].value.shape().to_vec();
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {seed_shape:?}"
            )));
        }
        let mut adjoint: Vec<Option<Tensor<T>>> = vec![None; loss.index + 1];
        adjoint[loss.index] = Some(Tensor::ones(&seed_shape));

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                adjoint[i] = None;
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                let input_grads = op.backward(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                for ((&j, gj), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(gj), true) = (gj, need) else { continue };
                    debug_assert_eq!(
                        gj.shape(),
                        self.nodes[j].value.shape(),
                        "gradient shape from {}",
                        op.name()
                    );
                    match &mut adjoint[j] {
                        Some(acc) => acc.add_assign(&gj)?,
                        slot => *slot = Some(gj),
                    }
                }
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

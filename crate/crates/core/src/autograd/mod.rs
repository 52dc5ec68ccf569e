//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for the
//! tracked leaves. Domain-specific operations (bilinear sampling, correlation)
//! are registered from their own modules through [`Graph::custom`].

pub mod gradcheck;
mod ops;
mod tensor;

pub mod gemm;

pub(crate) use ops::pool2_forward as pool2;
pub use tensor::{inverse_permutation, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to the node output.
    pub grad: &'a Tensor,
    /// Forward value of the node.
    pub output: &'a Tensor,
    /// Forward values of the parents, in registration order.
    pub inputs: Vec<&'a Tensor>,
    /// Whether each parent needs a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Consumes the graph, moving out the values of `vars`.
    pub fn into_values(mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|v| std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0])))
            .collect()
    }

    /// Copies the value of `v` into a new untracked node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers an operation. The backward closure is dropped when no parent
    /// is tracked.
    pub fn custom(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            parents,
            backward: tracked.then_some(backward),
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut pending: Vec<Option<Tensor>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        pending[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                if node.tracked {
                    leaves[i] = Some(grad);
                }
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].tracked).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].tracked {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut pending[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Given the upstream gradient, the parent values and the node's own value,
/// returns one gradient contribution per parent (in parent order).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Identifier of a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Reverse-mode computation tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// reverse topological order and backward visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
        })
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Backpropagates from a single-element node. Returns how many backward
    /// rules ran.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        let mut ran = 0;
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let contributions = rule(&upstream, &parent_values, &node.value);
                ran += 1;
                if contributions.len() != node.parents.len() {
                    return Err(Error::Dimension(format!(
                        "backward rule of node {i} returned {} gradients for {} parents",
                        contributions.len(),
                        node.parents.len()
                    )));
                }
                for (p, c) in node.parents.iter().zip(contributions) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    if c.shape() != self.nodes[p.0].value.shape() {
                        return Err(Error::Dimension(format!(
                            "gradient shape {:?} does not match parent shape {:?}",
                            c.shape(),
                            self.nodes[p.0].value.shape()
                        )));
                    }
                    match &mut self.grads[p.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            self.grads[i] = Some(upstream);
        }
        Ok(ran)
    }

    /// Gradients for every stored parameter (zeros where unreachable).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

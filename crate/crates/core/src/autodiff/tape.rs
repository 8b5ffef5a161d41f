//! Reverse-mode tape. Ops append nodes with a backward closure; the
//! backward sweep walks the nodes in reverse, so replay visits every
//! recorded op exactly once and the graph is acyclic by construction.

use super::tensor::Tensor;
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

struct OpRecord<T> {
    inputs: Vec<VarId>,
    /// (grad wrt output, input values) -> grad per input, in input order.
    backward: BackwardFn<T>,
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Option<OpRecord<T>>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        debug_assert!(value.all_finite(), "leaf value must be finite");
        self.nodes.push(Node { value, grad: None, requires_grad, op: None });
        VarId(self.nodes.len() - 1)
    }

    /// Records an op output. `backward` receives the output gradient and the
    /// input values and must return one gradient tensor per input.
    pub fn record(
        &mut self,
        inputs: Vec<VarId>,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + 'static,
    ) -> VarId {
        debug_assert!(value.all_finite(), "op output must be finite");
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Some(OpRecord { inputs, backward: Box::new(backward) }),
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded ops whose backward closures the sweep will visit.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    /// Seeds the loss gradient with ones and sweeps the tape in reverse.
    pub fn backward(&mut self, loss: VarId) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::ones(self.nodes[loss.0].value.shape());
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].op.is_none() || self.nodes[i].grad.is_none() {
                continue;
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = self.nodes[i].grad.clone().unwrap();
            let (input_ids, grads) = {
                let op = self.nodes[i].op.as_ref().unwrap();
                let input_vals: Vec<&Tensor<T>> =
                    op.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let grads = (op.backward)(&gout, &input_vals);
                debug_assert_eq!(grads.len(), op.inputs.len());
                (op.inputs.clone(), grads)
            };
            for (id, g) in input_ids.into_iter().zip(grads) {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[id.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }
}

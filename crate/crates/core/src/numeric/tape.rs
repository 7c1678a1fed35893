//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves created with
//! [`Tape::param`] require gradients; [`Tape::constant`] leaves do not, and any
//! node whose inputs are all constant records no backward closure. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every parameter leaf.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    is_leaf: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[usize], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_leaf: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar node. Every parameter leaf gets an entry
    /// in the result, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        let mut leaf_grads = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.is_leaf {
                if node.requires_grad {
                    leaf_grads.insert(id, g);
                }
                continue;
            }
            let Some(back) = &node.backward else { continue };
            for (parent, pg) in node.parents.iter().zip(back(&g)) {
                let Some(pg) = pg else { continue };
                if !nodes[*parent].requires_grad {
                    continue;
                }
                match &mut grads[*parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                leaf_grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Gradients { grads: leaf_grads }
    }
}

/// Gradients of parameter leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

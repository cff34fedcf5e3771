//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] then walks the tape in reverse and
//! accumulates gradients for every node that requires them. Nodes that do not
//! depend on a gradient-requiring leaf never store a backward closure, so a
//! graph built with [`Graph::no_grad`] is a plain eager evaluator.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Computes parent gradients from the output gradient. `needs[i]` tells
/// whether parent `i` wants a gradient; entries for other parents may be
/// `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph whose leaves never require gradients.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false })
    }

    /// A leaf that receives gradients (unless the graph is `no_grad`).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
        })
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn op(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.graph, self), "var from another graph");
                nodes[p.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaf_grads = HashMap::new();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads: leaf_grads };
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        leaf_grads.insert(id, g);
                    }
                }
                Some(bw) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = bw(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaf_grads }
    }
}

/// Gradients of leaf variables after a backward pass.
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    /// Gradient of `var`, or zeros when it received none.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Same value, severed from the tape (stop-gradient).
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }
}

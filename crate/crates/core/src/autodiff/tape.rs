use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: &'static str,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of operations. Confined to one thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
    non_finite: RefCell<Option<String>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Finite-value checking is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: cfg!(debug_assertions),
            non_finite: RefCell::new(None),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_node("param", value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node("constant", value, false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Name of the first op that produced a NaN or infinity, when checks are on.
    pub fn non_finite(&self) -> Option<String> {
        self.non_finite.borrow().clone()
    }

    pub(crate) fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        inputs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Appends an op result. `backward` is dropped when no input needs a gradient.
    pub(crate) fn push(&self, op: &'static str, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let rg = self.any_requires_grad(inputs);
        self.push_node(op, value, rg, rg.then_some(backward))
    }

    fn push_node(
        &self,
        op: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        if self.check_finite && !value.is_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(format!("{op} (node {})", self.len()));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Registers an op whose gradient is supplied by the caller.
    ///
    /// `backward` maps the output gradient to one gradient per input, in order;
    /// entries for inputs that do not require gradients are ignored.
    pub fn custom(
        &self,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Var {
        let ins = inputs.to_vec();
        self.push(
            "custom",
            inputs,
            output,
            Box::new(move |g, sink| {
                let grads = backward(g);
                assert_eq!(grads.len(), ins.len(), "custom op returned wrong gradient count");
                for (v, gi) in ins.iter().zip(grads) {
                    sink.accumulate(*v, &gi.data);
                }
            }),
        )
    }

    /// Reverse sweep from a scalar `loss`; visits nodes in reverse insertion order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let flags: Vec<(bool, Vec<usize>)> = nodes
            .iter()
            .map(|nd| (nd.requires_grad, nd.value.shape.clone()))
            .collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&nodes[loss.0].value.shape, T::one()));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(bw) => {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        flags: &flags,
                    };
                    bw(&g, &mut sink);
                }
                // Only leaf gradients are kept.
                None => grads[id] = Some(g),
            }
        }
        Ok(Gradients { grads })
    }

    /// Op names in insertion order, for diagnostics.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }
}

/// Accumulates input gradients during the reverse sweep.
pub struct GradSink<'a, T> {
    grads: &'a mut Vec<Option<Tensor<T>>>,
    flags: &'a [(bool, Vec<usize>)],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.flags[v.0].0
    }

    pub fn accumulate(&mut self, v: Var, g: &[T]) {
        let (rg, shape) = &self.flags[v.0];
        if !rg {
            return;
        }
        match &mut self.grads[v.0] {
            Some(t) => {
                assert_eq!(t.data.len(), g.len(), "gradient length mismatch");
                for (a, b) in t.data.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.clone(), g.to_vec()));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

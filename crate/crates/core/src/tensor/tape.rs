use std::cell::RefCell;
use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

/// How a node was produced; everything backward needs beyond input values.
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulGain(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv1d { x: Var, kernel: Var },
    InnerProduct(Var, Var),
    SumAll(Var),
    Mean(Var),
    SumSquares(Var),
    CapsuleProject { weights: Var, z: Var, shared: bool },
    WeightedSum { caps: Var, coef: Var },
    Agreement { caps: Var, nodes: Var },
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Value,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied; each
/// parameter appears on the tape at most once no matter how often
/// [`Tape::param`] is called, so shared weights accumulate one gradient.
pub struct Tape<'p> {
    params: &'p ParamStore,
    pub(crate) nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push_node(shape, Value::Owned(data), Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push_node(shape, Value::Owned(data), Op::Leaf, false)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push_node(
            p.tensor.shape().to_vec(),
            Value::Param(id),
            Op::Param(id),
            p.trainable,
        );
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    /// The parameter a node reads from, if it is a parameter leaf.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes.borrow()[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor {
            shape: nodes[v.0].shape.clone(),
            data: self.val(&nodes, v).to_vec(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        self.val(&nodes, v)[0]
    }

    pub(crate) fn val<'a>(&'a self, nodes: &'a [Node], v: Var) -> &'a [f64] {
        match &nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.tensor(*id).data(),
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(shape, Value::Owned(data), op, requires_grad)
    }

    fn push_node(&self, shape: Vec<usize>, value: Value, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Nodes are visited once each, newest first; a node consumed by several
    /// later operations has all their contributions summed before it is
    /// processed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (&pid, &var) in self.param_vars.borrow().iter() {
            params[pid.0] = grads[var.0].take();
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<Var> {
    use Op::*;
    match op {
        Leaf | Param(_) => vec![],
        Transpose(x) | Reshape(x) | Scale(x, _) | Relu(x) | Tanh(x) | Sigmoid(x) | Abs(x)
        | SumAll(x) | Mean(x) | SumSquares(x) => vec![*x],
        Softmax { x, .. } | LayerNorm { x, .. } | Narrow { x, .. } => vec![*x],
        MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MulGain(a, b)
        | InnerProduct(a, b) => vec![*a, *b],
        Concat { inputs, .. } => inputs.clone(),
        Conv1d { x, kernel } => vec![*x, *kernel],
        CapsuleProject { weights, z, .. } => vec![*weights, *z],
        WeightedSum { caps, coef } => vec![*caps, *coef],
        Agreement { caps, nodes } => vec![*caps, *nodes],
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tape node, if it was reached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        if let Some(pid) = tape.param_of(v) {
            return self.param(pid).map(|g| Tensor {
                shape: tape.shape(v),
                data: g.to_vec(),
            });
        }
        self.nodes[v.0].as_ref().map(|g| Tensor {
            shape: tape.shape(v),
            data: g.clone(),
        })
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, indexed by [`ParamId`]; `None` when unused.
    pub fn into_param_grads(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

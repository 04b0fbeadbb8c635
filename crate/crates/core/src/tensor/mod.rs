//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node: its value, its shape, and (when
//! it requires a gradient) the operation that produced it together with
//! handles to that operation's inputs. The parent links form the gradient
//! graph; node ids grow monotonically, so reverse id order is a valid reverse
//! execution order for [`Tensor::backward`].
//!
//! When no input requires a gradient, or inside [`no_grad`], an operation
//! records nothing and intermediate values are freed as soon as their handles
//! drop.

mod kernels;
pub mod memory;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use memory::Buffer;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(previous);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Vector-Jacobian product for an operation defined outside this module.
///
/// Receives the upstream gradient of the output and returns one gradient per
/// input, in input order.
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) enum Op {
    /// Leaf that accumulates its gradient into `Tensor::grad`.
    Leaf,
    /// Value with no gradient history.
    Constant,
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Prelu(Tensor, Tensor),
    Softmax(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
    },
    MatMul {
        a: Tensor,
        b: Tensor,
        trans_b: bool,
    },
    Permute(Tensor, Vec<usize>),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Sum(Tensor),
    Conv1d {
        x: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
    },
    ConvTranspose1d {
        y: Tensor,
        weight: Tensor,
        stride: usize,
    },
    Frames {
        x: Tensor,
        frame: usize,
        hop: usize,
    },
    OverlapAdd {
        x: Tensor,
        hop: usize,
    },
    Custom {
        inputs: Vec<Tensor>,
        backward: CustomBackward,
    },
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Buffer,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Handle to a node of the gradient graph. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::config(format!("shape {shape:?} has a zero extent")));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::config(format!(
            "shape {shape:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Buffer::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Result of an operation over `inputs`; history is kept only when needed.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        op: impl FnOnce() -> Op,
    ) -> Tensor {
        if cfg!(debug_assertions)
            && inputs.iter().all(|t| t.is_finite())
            && !data.iter().all(|v| v.is_finite())
        {
            panic!("operation produced non-finite values from finite inputs");
        }
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = if requires_grad { op() } else { Op::Constant };
        Tensor::from_parts(shape, data, requires_grad, op)
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            data,
            false,
            Op::Constant,
        ))
    }

    /// Trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false, Op::Constant)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf | Op::Constant)
    }

    fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::usage(format!(
                "item() on a tensor of shape {:?}",
                self.shape()
            ))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Copy of the value with no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.shape.clone(), self.to_vec(), false, Op::Constant)
    }

    pub fn grad(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Applies `f` to the stored gradient, if any.
    pub fn update_grad(&self, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    /// Mutable access to a leaf's values.
    ///
    /// Fails while any other handle (e.g. a live graph built from this leaf)
    /// still shares the node.
    pub fn data_mut(&mut self) -> Result<&mut [f64]> {
        match Rc::get_mut(&mut self.0) {
            Some(node) if matches!(node.op, Op::Leaf | Op::Constant) => Ok(&mut node.data),
            Some(_) => Err(Error::usage("data_mut on a non-leaf tensor")),
            None => Err(Error::usage(
                "data_mut on a shared tensor; drop the graph built from it first",
            )),
        }
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients are accumulated (added) into every reachable leaf that
    /// requires a gradient; call [`Tensor::zero_grad`] on leaves beforehand to
    /// start from zero.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            for parent in t.0.op.inputs() {
                if parent.requires_grad() && seen.insert(parent.id()) {
                    stack.push(parent.clone());
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => *slot = Some(grad),
                }
                continue;
            }
            for (parent, g) in node.0.op.vjp(&node, &grad) {
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.id(), g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Records an operation whose forward value and vector-Jacobian product are
/// supplied by the caller.
///
/// `data`/`shape` is the already computed output; `backward` maps the output
/// gradient to one gradient per input.
pub fn custom_op(
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: &[usize],
    backward: CustomBackward,
) -> Result<Tensor> {
    check_shape(shape, data.len())?;
    let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::from_op(shape.to_vec(), data, inputs, move || {
        Op::Custom {
            inputs: owned,
            backward,
        }
    }))
}

#[cfg(test)]
mod tests;

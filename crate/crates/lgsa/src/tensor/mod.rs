//! Reverse-mode tensor algebra.
//!
//! Tensors are immutable f64 arrays in row-major order, canonical image
//! layout batch x channels x height x width. Every op records its operands,
//! so a scalar result can be differentiated with [`Tensor::backward`].
//! Graph construction is single-threaded; independent graphs are
//! independent.

mod backprop;
pub(crate) mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

use kernels::ConvDims;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// The operation that produced a tensor, with everything backward needs.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Powf(Tensor, f64),
    Ln(Tensor),
    Abs(Tensor),
    Clamp(Tensor, f64, f64),
    Sigmoid(Tensor),
    Relu(Tensor),
    Sum(Tensor),
    Matmul(Tensor, Tensor),
    Transpose2(Tensor),
    SoftmaxRows(Tensor),
    Conv2d {
        x: Tensor,
        kernel: Tensor,
        bias: Tensor,
        dims: ConvDims,
        batch: usize,
    },
    Bilinear(Tensor),
    ConcatChannels(Vec<Tensor>),
    BroadcastChannels(Tensor),
    MeanChannels(Tensor),
    ToTokens(Tensor),
    FromTokens(Tensor),
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Handle to a node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant tensor (not tracked by the graph).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that will receive a gradient on backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument {
                op: "param",
                msg: format!("shape {:?} wants {} values, got {}", shape, shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.inner.data.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.inner.shape),
            });
        }
        Ok(self.inner.data[0])
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow_mut().take()
    }
}

/// Interpret a 4D shape as (batch, channels, height, width).
pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected 4D batch x channel x height x width, got {:?}", shape),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

pub(crate) fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected 2D rows x cols, got {:?}", shape),
        });
    }
    Ok((shape[0], shape[1]))
}

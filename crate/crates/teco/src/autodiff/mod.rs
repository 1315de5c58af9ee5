//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every op appends a node holding its
//! result and enough bookkeeping to replay adjoints in reverse order.
//! Persistent trainable state lives in [`Param`] handles; a forward pass
//! mounts them into the graph and `backward` accumulates into their grads.

mod conv;
mod graph;

pub use conv::{conv3d_backward, conv3d_forward, conv_out_len};
pub use graph::{Graph, NodeId, ReduceKind};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Result, TecoError};

/// Dense n-dimensional array, row-major, 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TecoError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TecoError::DataLength {
                len: self.data.len(),
                shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

#[derive(Debug)]
pub struct ParamInner {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
}

/// Shared handle to a trainable tensor. Clones alias the same storage.
#[derive(Clone, Debug)]
pub struct Param(Rc<RefCell<ParamInner>>);

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            value,
            grad: None,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        RefMut::map(self.0.borrow_mut(), |p| &mut p.value)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn accumulate_grad(&self, g: &[f32]) {
        let mut inner = self.0.borrow_mut();
        match &mut inner.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_data_contract() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn param_grad_accumulates() {
        let p = Param::new("w", Tensor::zeros(&[3]));
        p.accumulate_grad(&[1.0, 2.0, 3.0]);
        p.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(p.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }
}

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tape::NodeId;

/// Dense row-major f32 tensor.
///
/// Values are reference counted so that detaching, saving for backward and
/// loading a parameter never copy data. `node` links the value to the tape
/// that produced it; a tensor without a node is a constant.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    pub(crate) node: Option<NodeId>,
    /// Set for parameter values: backward may reference them without the
    /// tape registering them as saved activations.
    pub(crate) weight: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if numel(shape) != data.len() {
            return invalid(alloc::format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), Rc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<f32>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            node: None,
            weight: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_parts(shape.to_vec(), Rc::new(alloc::vec![value; numel(shape)]))
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(Vec::new(), Rc::new(alloc::vec![value]))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> &Rc<Vec<f32>> {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn bytes(&self) -> u64 {
        4 * self.data.len() as u64
    }

    /// True when this tensor is recorded on a tape and may carry gradient.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape node. Downstream ops never route gradient back
    /// through the result.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
            weight: self.weight,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max(libm::fabsf(a - b)))
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

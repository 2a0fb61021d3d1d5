//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major buffer plus a shape. Tensors built from raw
//! data are constants; registering one on a [`Tape`] with [`Tape::leaf`]
//! yields a tracked copy whose gradient can be queried after
//! [`Tape::backward`]. Every primitive op lives on the tape so that the
//! recording can follow control flow that changes from step to step (the
//! per-timestep gradient gating of the training objective reshapes the graph
//! on every minibatch).

mod tape;

pub use tape::{Gradients, NodeId, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 values.
///
/// Cloning is cheap: the buffer is shared. A tensor with `node == None` is a
/// constant; ops combining only constants are computed eagerly and never
/// recorded, which is what evaluation without gradients relies on.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} has {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![x]),
            node: None,
        }
    }

    /// Rank-1 vector.
    pub fn vector(data: &[f64]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data.to_vec()),
            node: None,
        }
    }

    /// Rank-2 matrix from fixed-width rows, mostly for tests and hand cases.
    pub fn matrix<const N: usize>(rows: &[[f64; N]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * N);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![rows.len(), N],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element (r, c) of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Mutable access to the underlying buffer. Copies if the buffer is
    /// shared (e.g. still referenced by a tape from the previous step), so
    /// recorded values are never edited behind a tape's back.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// A constant copy: same value, detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: NodeId) -> Self {
        Tensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// Relative error between an analytic and a numerical gradient entry, with a
/// floor so near-zero pairs compare absolutely instead of blowing up.
pub fn grad_rel_err(analytic: f64, numerical: f64) -> f64 {
    let denom = analytic.abs().max(numerical.abs()).max(1e-3);
    (analytic - numerical).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn matrix_layout_is_row_major() {
        let m = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.at2(1, 0), 3.0);
    }

    #[test]
    fn detached_drops_node_but_keeps_data() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0]));
        assert!(x.node().is_some());
        let d = x.detached();
        assert!(d.node().is_none());
        assert_eq!(d.data(), x.data());
    }
}

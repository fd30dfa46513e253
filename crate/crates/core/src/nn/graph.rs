//! The autodiff tape: nodes, tensor handles, and the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{fmt_shape, shape_len, Scalar};

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradStore<S>)>;

pub(crate) struct Node<S: Scalar> {
    pub needs_grad: bool,
    pub backward: Option<BackwardFn<S>>,
}

/// A recording of forward operations. Dropped and rebuilt every training
/// step; parameters live outside in a [`super::ParamStore`].
pub struct Graph<S: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn push_node(
        &self,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            needs_grad,
            backward,
        });
        nodes.len() - 1
    }

    /// A non-differentiable value (targets, masks, detached features).
    pub fn constant(&self, shape: &[usize], data: Vec<S>) -> Tensor<'_, S> {
        assert_eq!(data.len(), shape_len(shape), "constant data/shape mismatch");
        let id = self.push_node(false, None);
        Tensor {
            graph: self,
            id,
            shape: shape.to_vec(),
            data: Rc::new(data),
        }
    }

    /// Convenience constant from f64 values.
    pub fn constant_f64(&self, shape: &[usize], data: &[f64]) -> Tensor<'_, S> {
        self.constant(shape, data.iter().map(|v| S::from_f64(*v)).collect())
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_, S> {
        self.constant(&[1], vec![S::from_f64(v)])
    }

    /// A gradient sink: a leaf whose gradient is retrievable after backward.
    pub fn leaf(&self, shape: &[usize], data: Rc<Vec<S>>, trainable: bool) -> Tensor<'_, S> {
        assert_eq!(data.len(), shape_len(shape), "leaf data/shape mismatch");
        let id = self.push_node(trainable, None);
        Tensor {
            graph: self,
            id,
            shape: shape.to_vec(),
            data,
        }
    }

    /// Reverse pass from a scalar root. Each node is visited at most once, in
    /// reverse creation order; gradients accumulate additively.
    pub fn backward(&self, root: &Tensor<'_, S>) -> Result<GradStore<S>> {
        if root.data.len() != 1 {
            return Err(Error::op(
                "backward",
                format!("root must be scalar, got {}", fmt_shape(&root.shape)),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut store = GradStore {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        if !nodes[root.id].needs_grad {
            return Ok(store);
        }
        store.grads[root.id] = Some(vec![S::one()]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            if let Some(bw) = &node.backward {
                bw(&grad, &mut store);
            }
            store.grads[id] = Some(grad);
        }
        Ok(store)
    }
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn get(&self, id: usize) -> Option<&[S]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<S>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }

    /// Get-or-zero-initialize the buffer for `id`, then let `f` add into it.
    pub(crate) fn accumulate(&mut self, id: usize, len: usize, f: impl FnOnce(&mut [S])) {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); len]);
        }
        f(slot.as_mut().expect("just filled"));
    }
}

/// A handle to a value on the tape. Cheap to clone (shares the data buffer).
pub struct Tensor<'g, S: Scalar> {
    pub(crate) graph: &'g Graph<S>,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Clone for Tensor<'_, S> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph,
            id: self.id,
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
        }
    }
}

impl<'g, S: Scalar> Tensor<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Scalar extraction; panics if the tensor is not length 1.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0].as_f64()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_graph(&self, other: &Tensor<'g, S>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }

    pub(crate) fn op_result(
        &self,
        shape: Vec<usize>,
        data: Vec<S>,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor<'g, S> {
        debug_assert_eq!(data.len(), shape_len(&shape));
        let id = self
            .graph
            .push_node(needs_grad, if needs_grad { backward } else { None });
        Tensor {
            graph: self.graph,
            id,
            shape,
            data: Rc::new(data),
        }
    }

    /// Same data viewed under a new shape of equal length.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<'g, S>> {
        if shape_len(new_shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                fmt_shape(new_shape),
                fmt_shape(&self.shape),
            ));
        }
        let needs = self.needs_grad();
        let pid = self.id;
        let len = self.data.len();
        let backward: Option<BackwardFn<S>> = Some(Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += *gv;
                }
            });
        }));
        let id = self
            .graph
            .push_node(needs, if needs { backward } else { None });
        Ok(Tensor {
            graph: self.graph,
            id,
            shape: new_shape.to_vec(),
            data: Rc::clone(&self.data),
        })
    }
}

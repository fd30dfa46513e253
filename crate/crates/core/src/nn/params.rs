//! Named parameters, initialization, graph binding, and the SGD step.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{GradStore, Graph, Tensor};
use crate::nn::{shape_len, Scalar};
use crate::seeding;

pub type ParamId = usize;

/// A learnable array plus its momentum buffer.
pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<S>>,
    velocity: Vec<S>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
    KaimingUniform { fan_in: usize },
}

/// An ordered collection of named parameters. Registration order is the
/// checkpoint order, so construction must be deterministic.
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    /// Base seed mixed with each parameter's name for its init stream.
    init_seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(init_seed: u64) -> Self {
        Self {
            params: Vec::new(),
            init_seed,
        }
    }

    /// Register a parameter. Initial values depend only on the store seed and
    /// the parameter name, never on registration order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let len = shape_len(shape);
        let data = match init {
            Init::Zeros => vec![S::zero(); len],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = seeding::stream_rng(self.init_seed, fnv1a64(name));
                (0..len)
                    .map(|_| S::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Rc::new(data),
            velocity: vec![S::zero(); len],
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Mutable view of a parameter's values (copy-on-write under the hood).
    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<S> {
        Rc::make_mut(&mut self.params[id].data)
    }

    /// Bitwise equality of all parameter values.
    pub fn bits_equal(&self, other: &ParamStore<S>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data
                        .iter()
                        .zip(b.data.iter())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Fowler-Noll-Vo 1a, for stable per-parameter seed streams.
fn fnv1a64(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Binds parameters of one store into one graph for a single forward pass.
///
/// A parameter bound twice returns the same leaf node, so gradients from both
/// uses accumulate on one buffer — this is what makes the two student
/// branches genuinely share weights.
pub struct Session<'g, 'p, S: Scalar> {
    pub graph: &'g Graph<S>,
    store: &'p ParamStore<S>,
    trainable: bool,
    bound: RefCell<Vec<Option<usize>>>,
}

impl<'g, 'p, S: Scalar> Session<'g, 'p, S> {
    pub fn new(graph: &'g Graph<S>, store: &'p ParamStore<S>, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// The leaf tensor for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Tensor<'g, S> {
        let mut bound = self.bound.borrow_mut();
        let p = self.store.get(id);
        if let Some(node) = bound[id] {
            return Tensor {
                graph: self.graph,
                id: node,
                shape: p.shape.clone(),
                data: Rc::clone(&p.data),
            };
        }
        let t = self.graph.leaf(&p.shape, Rc::clone(&p.data), self.trainable);
        bound[id] = Some(t.id());
        t
    }

    /// (param, node) pairs for every parameter bound so far.
    pub fn bound_params(&self) -> Vec<(ParamId, usize)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(pid, node)| node.map(|n| (pid, n)))
            .collect()
    }

    /// Pull this session's parameter gradients out of a backward result.
    /// Parameters that received no gradient get a zero buffer.
    pub fn collect_grads(&self, grads: &mut GradStore<S>) -> Vec<(ParamId, Vec<S>)> {
        self.bound_params()
            .into_iter()
            .map(|(pid, node)| {
                let g = grads
                    .take(node)
                    .unwrap_or_else(|| vec![S::zero(); self.store.get(pid).data.len()]);
                (pid, g)
            })
            .collect()
    }
}

/// Momentum SGD: `v <- mu v + g; p <- p - lr v`.
///
/// The whole step is rejected (no parameter is touched) if any gradient
/// entry is non-finite.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[(ParamId, Vec<S>)],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidConfig(format!("lr must be > 0, got {lr}")));
    }
    for (pid, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: store.get(*pid).name.clone(),
            });
        }
        if g.len() != store.get(*pid).data.len() {
            return Err(Error::shape("sgd_step", store.get(*pid).data.len(), g.len()));
        }
    }
    let lr = S::from_f64(lr);
    let mu = S::from_f64(momentum);
    for (pid, g) in grads {
        let p = &mut store.params[*pid];
        let data = Rc::make_mut(&mut p.data);
        for i in 0..g.len() {
            p.velocity[i] = mu * p.velocity[i] + g[i];
            data[i] = data[i] - lr * p.velocity[i];
        }
    }
    Ok(())
}

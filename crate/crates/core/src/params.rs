//! Named parameter tensors and their binding onto a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Matrix;

/// Components that own named parameter tensors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    /// Copies of every parameter keyed by name.
    fn to_named(&self) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, m| {
            out.insert(name.to_string(), m.clone());
        });
        out
    }
}

/// Puts parameters on a graph and remembers which leaf belongs to which name.
pub struct Binder<'g> {
    pub graph: &'g mut Graph,
    bound: Vec<(String, Var)>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph) -> Self {
        Self {
            graph,
            bound: Vec::new(),
        }
    }

    /// Trainable leaves are recorded; frozen ones become constants.
    pub fn bind(&mut self, name: &str, value: &Matrix, trainable: bool) -> Var {
        if trainable {
            let v = self.graph.param(value.clone());
            self.bound.push((name.to_string(), v));
            v
        } else {
            self.graph.constant(value.clone())
        }
    }

    pub fn finish(self) -> Bound {
        Bound(self.bound.into_iter().collect())
    }
}

/// Name to leaf map for the trainable parameters of one graph.
#[derive(Debug, Default, Clone)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Gradients for the bound parameters keyed by name.
    pub fn gradients(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.0
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(graph, v)))
            .collect()
    }
}

/// Gaussian initialisation with standard deviation `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    Matrix::randn(fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64), rng)
}

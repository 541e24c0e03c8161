//! Named parameter storage and per-graph leaf binding.
//!
//! Parameters live outside the autodiff graph as plain arrays; a
//! [`Graph`] binds each one to a grad-tracked leaf tensor for the duration
//! of a single forward/backward pass, so the optimizer reads gradients off
//! the leaves and writes updates back into the store.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Excluded from weight decay (scalars, gains, positional embeddings).
    pub no_decay: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, no_decay: bool) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "param {name} registered twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            values,
            no_decay,
        });
    }

    /// Gaussian init, std scaled as given.
    pub fn register_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| gaussian(rng) * std).collect();
        self.register(name, shape, values, false);
    }

    pub fn register_const(&mut self, name: &str, shape: Vec<usize>, value: f64, no_decay: bool) {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![value; n], no_decay);
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.entries[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.entries[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn mark_no_decay(&mut self, name: &str) {
        self.get_mut(name).no_decay = true;
    }

    /// Registration order, which is the canonical checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }
}

/// Box-Muller; two uniform draws per sample keeps the stream layout simple
/// and deterministic.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One forward/backward pass worth of parameter bindings.
pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: bool,
    leaves: RefCell<HashMap<String, Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Graph {
            store,
            trainable: true,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Inference binding: leaves carry no grad, so no tape is recorded.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Graph {
            store,
            trainable: false,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// The leaf tensor bound to `name`, created on first use so gradients
    /// from every use site accumulate on one node.
    pub fn p(&self, name: &str) -> Tensor {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let param = self.store.get(name);
        let t = if self.trainable {
            Tensor::leaf(param.shape.clone(), param.values.clone()).expect("finite param")
        } else {
            Tensor::from_vec(param.shape.clone(), param.values.clone()).expect("finite param")
        };
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Gradients accumulated on bound leaves, keyed by parameter name.
    /// Parameters never touched by the loss are absent.
    pub fn grads(&self) -> HashMap<String, Vec<f64>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, leaf)| leaf.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

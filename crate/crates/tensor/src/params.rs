//! Named parameter storage and per-graph binding.
//!
//! Each parameter is initialized from its own random stream derived from the
//! store seed and the parameter name, so two models that share parameter
//! names start from identical values regardless of declaration order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Uniform in `±1/sqrt(fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Square identity matrix plus uniform noise in `±noise`.
    Identity { noise: f64 },
    /// Convolution kernel `[cout, cin/groups, k, k]` passing channel `o % (cin/groups)`
    /// through the center tap, plus uniform noise in `±noise`.
    Dirac { noise: f64 },
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    seed: u64,
    params: BTreeMap<String, Param<T>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write_u64(seed);
    h.write(name.as_bytes());
    h.finish()
}

/// Values for `shape` drawn per `init` from a stream keyed by `(seed, name)`.
pub fn init_values<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Normal { std } => {
            let d = Normal::new(0.0, std).expect("normal std must be finite and non-negative");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Uniform { bound } => uniform(&mut rng, n, bound),
        Init::KaimingUniform { fan_in } => uniform(&mut rng, n, 1.0 / (fan_in.max(1) as f64).sqrt()),
        Init::Identity { noise } => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square matrix");
            let mut v = uniform(&mut rng, n, noise);
            for i in 0..shape[0] {
                v[i * shape[0] + i] += 1.0;
            }
            v
        }
        Init::Dirac { noise } => {
            assert!(shape.len() == 4 && shape[2] % 2 == 1 && shape[3] % 2 == 1, "dirac init needs an odd conv kernel");
            let mut v = uniform(&mut rng, n, noise);
            let (cin, kh, kw) = (shape[1], shape[2], shape[3]);
            for o in 0..shape[0] {
                v[((o * cin + o % cin) * kh + kh / 2) * kw + kw / 2] += 1.0;
            }
            v
        }
    };
    Tensor::from_f64(shape, &data)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    if bound == 0.0 {
        return vec![0.0; n];
    }
    let d = Uniform::new_inclusive(-bound, bound).expect("uniform bound must be finite");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name` with a freshly initialized value. Re-declaring an
    /// existing name keeps its value; the shape must agree.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) {
        if let Some(p) = self.params.get(name) {
            assert_eq!(p.value.shape(), shape, "parameter {name} re-declared with another shape");
            return;
        }
        let value = init_values(self.seed, name, shape, init);
        self.params.insert(name.to_string(), Param { value, trainable: true });
    }

    /// Registers a non-trainable state tensor (running estimates and the like).
    pub fn declare_buffer(&mut self, name: &str, shape: &[usize], init: Init) {
        self.declare(name, shape, init);
        self.params.get_mut(name).expect("just declared").trainable = false;
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        self.params.insert(name.to_string(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        self.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters under `prefix` (`""` for all).
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }
}

/// Binds store parameters into one graph. Trainable parameters become
/// gradient leaves the first time they are used; others are constants.
pub struct Ctx<'a, T: Scalar> {
    graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var<'a, T>>>,
    updates: RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self { graph, store, bound: RefCell::new(BTreeMap::new()), updates: RefCell::new(BTreeMap::new()) }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&self, name: &str) -> Var<'a, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let param = self.store.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if param.trainable {
            self.graph.leaf(param.value.clone())
        } else {
            self.graph.constant(param.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Records a new value for a buffer, applied by [`Ctx::take_updates`].
    pub fn update_buffer(&self, name: &str, value: Tensor<T>) {
        self.updates.borrow_mut().insert(name.to_string(), value);
    }

    pub fn take_updates(&self) -> BTreeMap<String, Tensor<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients of every bound trainable parameter (zeros when unused by
    /// the loss).
    pub fn grads(&self, g: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), g.get_or_zeros(*v)))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::<f64>::new(7);
        a.declare("x", &[3, 3], Init::Normal { std: 1.0 });
        a.declare("y", &[4], Init::Uniform { bound: 0.5 });
        let mut b = ParamStore::<f64>::new(7);
        b.declare("y", &[4], Init::Uniform { bound: 0.5 });
        b.declare("x", &[3, 3], Init::Normal { std: 1.0 });
        assert_eq!(a.value("x").data(), b.value("x").data());
        assert_eq!(a.value("y").data(), b.value("y").data());
        assert_ne!(a.value("x").data()[..4], a.value("y").data()[..]);
    }

    #[test]
    fn identity_init_is_near_identity() {
        let t = init_values::<f64>(1, "w", &[3, 3], Init::Identity { noise: 1e-3 });
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((t.at(&[i, j]) - want).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn dirac_init_passes_center_tap() {
        let t = init_values::<f64>(1, "w", &[4, 1, 3, 3], Init::Dirac { noise: 0.0 });
        for o in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    let want = if (y, x) == (1, 1) { 1.0 } else { 0.0 };
                    assert_eq!(t.at(&[o, 0, y, x]), want);
                }
            }
        }
        let full = init_values::<f64>(1, "w", &[2, 2, 1, 1], Init::Dirac { noise: 1e-3 });
        assert!((full.at(&[0, 0, 0, 0]) - 1.0).abs() <= 1e-3 && full.at(&[0, 1, 0, 0]).abs() <= 1e-3);
        assert!((full.at(&[1, 1, 0, 0]) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn frozen_parameters_bind_as_constants() {
        let mut s = ParamStore::<f64>::new(0);
        s.declare("a.w", &[2], Init::Ones);
        s.declare("b.w", &[2], Init::Ones);
        s.set_trainable("a.", false);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s);
        let loss = (ctx.p("a.w") * ctx.p("b.w")).sum();
        let grads = ctx.grads(&g.backward(loss));
        assert!(!grads.contains_key("a.w"));
        assert_eq!(grads["b.w"].data(), &[1.0, 1.0]);
    }
}

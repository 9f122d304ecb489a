//! Reverse-mode differentiation.
//!
//! A [`Var`] is an immutable value plus, when any of its inputs needs a
//! gradient, the inputs and a closure computing their vector-Jacobian
//! products. Graphs built from constants only record nothing, so the same
//! forward code serves inference and training.
//!
//! Parameters are requested by name through a [`Scope`]. The [`Graph`]
//! behind it either reads a fixed [`ParamStore`] or, while building a model,
//! creates missing tensors from their [`Init`] rule.

mod check;
mod ops;
mod optim;

pub use check::{check_gradients, CheckOptions, CheckReport};
pub use ops::selective_scan;
pub use optim::{cosine_lr, AdamW, OptimState};

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Fnv, Tensor};

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

struct Node<T> {
    id: usize,
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
    name: Option<String>,
}

/// A value in a computation graph.
#[derive(Clone)]
pub struct Var<T = f32>(Rc<Node<T>>);

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn leaf(value: Tensor<T>, name: Option<String>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            name,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, None, false)
    }

    /// An unnamed leaf that does receive a gradient (reported under `name`).
    pub fn input(value: Tensor<T>, name: impl Into<String>) -> Self {
        Self::leaf(value, Some(name.into()), true)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub(crate) fn record<F>(
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        back: F,
    ) -> Result<Self>
    where
        F: Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        let requires_grad = parents.iter().any(Var::requires_grad);
        let (parents, backward): (Vec<Var<T>>, Option<BackFn<T>>) = if requires_grad {
            (parents, Some(Box::new(back)))
        } else {
            (Vec::new(), None)
        };
        Ok(Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            parents,
            backward,
            requires_grad,
            name: None,
        })))
    }

    /// Gradients of this scalar with respect to every named leaf it depends on.
    pub fn backward(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        if self.value().numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!("loss must be a scalar, got shape {:?}", self.shape()),
            });
        }
        let mut by_name = BTreeMap::new();
        if !self.requires_grad() {
            return Ok(by_name);
        }

        // Post-order DFS: every node appears after all of its parents.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.0.id) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.0.id, Tensor::ones(self.shape().to_vec()));
        for v in order.iter().rev() {
            let Some(g) = grads.remove(&v.0.id) else {
                continue;
            };
            if let Some(back) = &v.0.backward {
                let pgrads = back(&g, &v.0.parents, &v.0.value)?;
                for (p, pg) in v.0.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    if pg.shape() != p.shape() {
                        return Err(Error::Shape {
                            op: v.0.op,
                            detail: format!(
                                "backward produced {:?} for an input of shape {:?}",
                                pg.shape(),
                                p.shape()
                            ),
                        });
                    }
                    if !pg.is_finite() {
                        return Err(Error::NonFinite {
                            op: format!("{} (backward)", v.0.op),
                        });
                    }
                    match grads.get_mut(&p.0.id) {
                        Some(acc) => acc.add_assign(&pg)?,
                        None => {
                            grads.insert(p.0.id, pg);
                        }
                    }
                }
            }
            if let Some(name) = &v.0.name {
                match by_name.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, &g)?,
                    None => {
                        by_name.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(by_name)
    }
}

/// Named tensors, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// FNV-1a over names, shapes and value bits in sorted name order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.0
    }
}

/// How a missing parameter is created while building.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
    /// Row `d` of a `[D, N]` tensor is `ln(1), ..., ln(N)`.
    StateLog,
    /// Inverse softplus of a log-uniform sample in `[min, max]`.
    DtBias {
        min: f64,
        max: f64,
    },
}

impl Init {
    /// Kaiming-uniform bound `1 / sqrt(fan_in)`.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }

    fn sample<T: Real>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let last = *shape.last().unwrap_or(&1);
        Tensor::from_fn(shape.to_vec(), |i| {
            T::lit(match self {
                Init::Uniform(b) => {
                    if b > 0.0 {
                        rng.random_range(-b..=b)
                    } else {
                        0.0
                    }
                }
                Init::Const(v) => v,
                Init::StateLog => ((i % last + 1) as f64).ln(),
                Init::DtBias { min, max } => {
                    let dt: f64 = rng.random_range(min.ln()..=max.ln()).exp();
                    // softplus^-1(dt) = ln(e^dt - 1)
                    dt.exp_m1().ln()
                }
            })
        })
    }
}

/// Per-call record of a channel-matching decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub indices: Vec<usize>,
    /// Smallest gap between the chosen distance and the runner-up.
    pub margin: f64,
}

enum Source<'s, T> {
    Fixed(&'s ParamStore<T>),
    Building(ParamStore<T>, Box<ChaCha8Rng>),
}

/// Parameter provider and bookkeeping for one forward pass.
pub struct Graph<'s, T: Real = f32> {
    train: bool,
    source: RefCell<Source<'s, T>>,
    handed: RefCell<BTreeMap<String, Var<T>>>,
    routing: RefCell<Vec<Routing>>,
}

impl<'s, T: Real> Graph<'s, T> {
    /// Reads parameters from `store`; nothing is recorded.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with(Source::Fixed(store), false)
    }

    /// Reads parameters from `store` and records gradients for all of them.
    pub fn training(store: &'s ParamStore<T>) -> Self {
        Self::with(Source::Fixed(store), true)
    }

    /// Creates every requested parameter from its init rule.
    pub fn building(seed: u64) -> Self {
        Self::with(
            Source::Building(ParamStore::new(), Box::new(ChaCha8Rng::seed_from_u64(seed))),
            false,
        )
    }

    fn with(source: Source<'s, T>, train: bool) -> Self {
        Self {
            train,
            source: RefCell::new(source),
            handed: RefCell::new(BTreeMap::new()),
            routing: RefCell::new(Vec::new()),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn scope(&self) -> Scope<'_, 's, T> {
        Scope {
            graph: self,
            prefix: String::new(),
        }
    }

    /// The parameters created by a building graph.
    pub fn into_params(self) -> Option<ParamStore<T>> {
        match self.source.into_inner() {
            Source::Building(store, _) => Some(store),
            Source::Fixed(_) => None,
        }
    }

    fn param(&self, name: String, shape: &[usize], init: Init) -> Result<Var<T>> {
        if let Some(v) = self.handed.borrow().get(&name) {
            return check_param_shape(&name, v.value(), shape).map(|_| v.clone());
        }
        let value = match &mut *self.source.borrow_mut() {
            Source::Fixed(store) => store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
                .clone(),
            Source::Building(store, rng) => match store.get(&name) {
                Some(t) => t.clone(),
                None => {
                    let t = init.sample(shape, rng);
                    store.insert(name.clone(), t.clone());
                    t
                }
            },
        };
        check_param_shape(&name, &value, shape)?;
        let v = Var::leaf(value, Some(name.clone()), self.train);
        self.handed.borrow_mut().insert(name, v.clone());
        Ok(v)
    }

    /// Names of every parameter handed out so far.
    pub fn used_params(&self) -> Vec<String> {
        self.handed.borrow().keys().cloned().collect()
    }

    pub(crate) fn log_routing(&self, r: Routing) {
        self.routing.borrow_mut().push(r);
    }

    /// Channel-matching decisions in call order.
    pub fn routing(&self) -> Vec<Routing> {
        self.routing.borrow().clone()
    }

    /// Runs the backward pass and lists parameters that got no gradient.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let by_name = loss.backward()?;
        let detached = self
            .handed
            .borrow()
            .keys()
            .filter(|k| !by_name.contains_key(*k))
            .cloned()
            .collect();
        Ok(Gradients { by_name, detached })
    }
}

fn check_param_shape<T: Real>(name: &str, t: &Tensor<T>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Config(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
    /// Parameters used by the forward pass that the loss does not depend on.
    pub detached: Vec<String>,
}

/// Hierarchical parameter naming over a [`Graph`].
#[derive(Clone)]
pub struct Scope<'g, 's, T: Real> {
    graph: &'g Graph<'s, T>,
    prefix: String,
}

impl<'g, 's, T: Real> Scope<'g, 's, T> {
    pub fn sub(&self, name: impl fmt::Display) -> Self {
        Self {
            graph: self.graph,
            prefix: self.path(name),
        }
    }

    pub fn path(&self, name: impl fmt::Display) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn graph(&self) -> &'g Graph<'s, T> {
        self.graph
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var<T>> {
        self.graph.param(self.path(name), shape, init)
    }
}

/// Runs `f` on a building graph and returns the parameters it created.
pub fn build_params<T: Real>(
    seed: u64,
    f: impl FnOnce(&Scope<'_, '_, T>) -> Result<Var<T>>,
) -> Result<ParamStore<T>> {
    let g = Graph::building(seed);
    f(&g.scope())?;
    Ok(g.into_params().expect("building graph"))
}

/// Runs `f` against fixed parameters without recording a tape.
pub fn evaluate<T: Real>(
    store: &ParamStore<T>,
    f: impl FnOnce(&Scope<'_, '_, T>) -> Result<Var<T>>,
) -> Result<Tensor<T>> {
    let g = Graph::inference(store);
    Ok(f(&g.scope())?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_record_nothing() {
        let a = Var::constant(Tensor::<f64>::ones([2, 2]));
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
        assert!(b.sum().unwrap().backward().unwrap().is_empty());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Var::input(Tensor::<f64>::from_fn([3, 2], |i| i as f64), "x");
        let g = x.sum().unwrap().backward().unwrap();
        assert_eq!(g["x"], Tensor::ones([3, 2]));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let x = Var::input(Tensor::<f64>::full([1], 3.0), "x");
        // y = x*x + x  ->  dy/dx = 2x + 1
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g["x"].data(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Var::input(Tensor::<f64>::ones([2]), "x");
        assert!(x.backward().is_err());
    }

    #[test]
    fn building_then_reading_params() {
        let g = Graph::<f64>::building(3);
        let s = g.scope().sub("blk");
        let w = s.param("w", &[2, 3], Init::kaiming(4)).unwrap();
        assert!(w.value().data().iter().all(|v| v.abs() <= 0.5));
        let again = s.param("w", &[2, 3], Init::Const(9.0)).unwrap();
        assert_eq!(w.value(), again.value());
        assert!(s.param("w", &[3, 2], Init::Const(0.0)).is_err());
        s.param("a", &[2, 4], Init::StateLog).unwrap();
        let store = g.into_params().unwrap();
        assert_eq!(store.get("blk.a").unwrap().data()[3], 4f64.ln());
        assert_eq!(store.param_count(), 14);

        let g = Graph::training(&store);
        let s = g.scope().sub("blk");
        let w = s.param("w", &[2, 3], Init::Const(0.0)).unwrap();
        s.param("a", &[2, 4], Init::Const(0.0)).unwrap();
        assert!(s.param("missing", &[1], Init::Const(0.0)).is_err());
        let grads = g.backward(&w.sum().unwrap()).unwrap();
        assert_eq!(grads.detached, vec!["blk.a".to_string()]);
        assert_eq!(grads.by_name["blk.w"], Tensor::ones([2, 3]));
    }

    #[test]
    fn dt_bias_maps_into_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = Init::DtBias {
            min: 1e-3,
            max: 1e-1,
        }
        .sample(&[1000], &mut rng);
        for &v in t.data() {
            let dt = v.exp().ln_1p();
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn nonfinite_values_are_errors() {
        let x = Var::constant(Tensor::<f64>::full([1], 1e308));
        let err = x.scale(10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}

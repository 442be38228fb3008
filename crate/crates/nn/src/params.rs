//! Named parameter storage.

use crate::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initial value distribution of a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal {
        std: f64,
    },
    /// Normal resampled until within two standard deviations.
    TruncNormal {
        std: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    value: Option<Arc<Tensor>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named parameters.
///
/// A store created with [`ParamStore::shapes_only`] records names and shapes
/// without allocating values, which is enough for structural parameter
/// counting of large configurations.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    rng: Option<ChaCha8Rng>,
}

impl ParamStore {
    /// A store whose parameters are initialised from a seeded generator.
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn shapes_only() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), rng: None }
    }

    pub fn is_materialized(&self) -> bool {
        self.rng.is_some()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let value = self.rng.as_mut().map(|rng| Arc::new(sample(shape, init, rng)));
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape: shape.to_vec(), value });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        self.params[id.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("parameter {} has no value (shapes-only store)", self.params[id.0].name))
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        let p = &mut self.params[id.0];
        Arc::make_mut(p.value.as_mut().expect("shapes-only store has no values"))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        assert_eq!(p.shape, value.shape(), "shape mismatch setting {}", p.name);
        p.value = Some(Arc::new(value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(Param::numel).sum()
    }

    /// Overwrites every value with fresh `N(0, std²)` samples; used by gradient checks.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.value.is_some() {
                p.value = Some(Arc::new(Tensor::randn(p.shape.clone(), std, &mut rng)));
            }
        }
    }
}

fn sample(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::Const(v) => Tensor::full(shape.to_vec(), v),
        Init::Normal { std } => Tensor::randn(shape.to_vec(), std, rng),
        Init::TruncNormal { std } => Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
    }
}

//! Named trainable parameters and seeded initialisation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::var::{Arr, Var};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter; gradient tables are keyed by it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named tensor that the optimizer updates in place.
pub struct Param {
    id: ParamId,
    name: String,
    value: Arc<Arr>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Arr) -> Self {
        Param {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param::new(name, Arr::zeros(IxDyn(shape)))
    }

    pub fn full(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Param::new(name, Arr::from_elem(IxDyn(shape), v))
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rng: &mut ChaCha12Rng, name: impl Into<String>, shape: &[usize], std: f64) -> Self {
        Param::new(name, randn_arr(rng, shape, std))
    }

    /// Uniform Glorot init for a `[fan_in, fan_out]` weight.
    pub fn glorot(rng: &mut ChaCha12Rng, name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let v: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Param::new(name, Arr::from_shape_vec(IxDyn(&[fan_in, fan_out]), v).unwrap())
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Graph leaf sharing this parameter's storage (no copy).
    pub fn leaf(&self) -> Var {
        Var::param_leaf(self.value.clone(), self.id)
    }

    /// Replace the stored value, preserving identity. Shape must match.
    pub fn assign(&mut self, value: Arr) {
        assert_eq!(value.shape(), self.value.shape(), "assign: shape mismatch for {}", self.name);
        self.value = Arc::new(value);
    }

    /// Mutate the stored value in place (clones first only if a graph from a
    /// previous step still holds the storage).
    pub fn update_with(&mut self, f: impl FnOnce(&mut Arr)) {
        f(Arc::make_mut(&mut self.value));
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Anything that owns parameters and can hand them to an optimizer or a
/// checkpoint writer. Traversal order must be deterministic.
pub trait HasParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Deterministic RNG used everywhere in this workspace.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a sub-task, so parallel work remains
/// reproducible regardless of scheduling.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn randn_arr(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    // Box-Muller keeps us independent of distribution-crate versions here.
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        v.push(r * t.cos() * std);
        if v.len() < n {
            v.push(r * t.sin() * std);
        }
    }
    Arr::from_shape_vec(IxDyn(shape), v).unwrap()
}

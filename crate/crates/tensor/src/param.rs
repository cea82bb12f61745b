//! Named, seeded model parameters and their gradient buffers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::tensor::{validate_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule recorded with every parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Normal { std: f64 },
    /// `ln(n + 1)` along the last axis, so that `-exp(value)` spans `-1..=-N`.
    S4dRealLog,
    /// Inverse softplus of a step size drawn log-uniformly from `[min, max]`.
    InverseSoftplusLogUniform { min: f64, max: f64 },
}

impl Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::Uniform {
            low: -bound,
            high: bound,
        }
    }

    fn fill(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let last = *shape.last().unwrap_or(&1);
        match *self {
            Init::Zeros => {}
            Init::Ones => t.data_mut().fill(1.0),
            Init::Constant(c) => t.data_mut().fill(c),
            Init::Uniform { low, high } => {
                for v in t.data_mut() {
                    *v = rng.random_range(low..high);
                }
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in t.data_mut() {
                    *v = normal.sample(rng);
                }
            }
            Init::S4dRealLog => {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = ((i % last) as f64 + 1.0).ln();
                }
            }
            Init::InverseSoftplusLogUniform { min, max } => {
                let (lo, hi) = (min.ln(), max.ln());
                for v in t.data_mut() {
                    let dt: f64 = rng.random_range(lo..hi).exp();
                    *v = dt + (-(-dt).exp_m1()).ln();
                }
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

/// Ordered collection of uniquely named parameters.
///
/// Parameter `k` is initialized from ChaCha8 stream `k` of the store seed, so
/// values depend only on the seed and the registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        validate_shape(shape)?;
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let value = init.fill(shape, &mut self.rng_for(id));
        self.params.push(Parameter {
            name: name.clone(),
            grad: Tensor::zeros(shape),
            value,
            init,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    fn rng_for(&self, id: ParamId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id.0 as u64);
        rng
    }

    /// Re-draws every parameter from its init rule under `seed`.
    pub fn reinitialize(&mut self, seed: u64) {
        self.seed = seed;
        for k in 0..self.params.len() {
            let mut rng = self.rng_for(ParamId(k));
            let p = &mut self.params[k];
            p.value = p.init.fill(p.value.shape(), &mut rng);
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Names sharing `prefix`, in registration order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params
            .iter()
            .map(|p| p.name.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }
}

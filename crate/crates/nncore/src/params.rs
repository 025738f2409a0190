//! Named parameter storage, detached from any single graph.

use indexmap::IndexMap;
use rand::Rng;

use crate::NnError;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Kaiming-uniform over fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    KaimingUniform { fan_in: usize },
}

/// One tensor of learnable state plus its Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    /// Frozen parameters take part in the forward pass but never receive
    /// gradients or optimizer updates.
    pub frozen: bool,
    /// False for running statistics and other non-optimized buffers.
    pub trainable: bool,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Insertion-ordered parameter map; iteration order is deterministic and is
/// also the checkpoint layout order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
                frozen: false,
                trainable: true,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    /// Register a non-trainable buffer (e.g. batchnorm running statistics).
    pub fn add_buffer(&mut self, name: &str, shape: &[usize], value: f32) {
        let n: usize = shape.iter().product();
        self.params.insert(
            name.to_string(),
            Param {
                data: vec![value; n],
                shape: shape.to_vec(),
                frozen: false,
                trainable: false,
                m: Vec::new(),
                v: Vec::new(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param, NnError> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, NnError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Freeze every parameter (and buffer) whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, param) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                param.frozen = true;
            }
        }
    }

    /// Total number of trainable scalars (frozen ones included).
    pub fn parameter_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Names of trainable, unfrozen parameters, in insertion order.
    pub fn active_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub(crate) fn insert_raw(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }
}

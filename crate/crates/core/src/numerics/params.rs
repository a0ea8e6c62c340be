use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named collection of trainable tensors.
///
/// Every model keeps its weights here; a weight used by several layers is
/// stored exactly once and referenced by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let idx = self.tensors.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(value);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn set(&mut self, idx: usize, value: Tensor<T>) -> Result<()> {
        if self.tensors[idx].shape() != value.shape() {
            return Err(Error::dim("param_set", self.tensors[idx].shape(), value.shape()));
        }
        self.tensors[idx] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape` as a leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Collects gradients for bound parameters, in store order.
    pub fn grads(&self, grads: &Gradients<T>, bound: &[Var<'_, T>]) -> Vec<Tensor<T>> {
        bound.iter().map(|&v| grads.wrt(v)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Accumulates per-item gradients in a fixed order.
#[derive(Debug, Clone)]
pub struct GradAccumulator<T: Scalar = f64> {
    sums: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    count: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            sums: store.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            shapes: store.tensors.iter().map(|t| t.shape().to_vec()).collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &[Tensor<T>]) {
        for (s, g) in self.sums.iter_mut().zip(grads) {
            for (a, &b) in s.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient over the accumulated items; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Tensor<T>> {
        let inv = T::one() / T::of(self.count.max(1) as f64);
        let out = self
            .sums
            .iter_mut()
            .zip(&self.shapes)
            .map(|(s, shape)| {
                let data = s.iter().map(|&x| x * inv).collect();
                s.iter_mut().for_each(|x| *x = T::zero());
                Tensor::from_parts(shape.clone(), data)
            })
            .collect();
        self.count = 0;
        out
    }
}

pub const CHECKPOINT_FORMAT: &str = "livesketch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: a model kind, its config and named parameter arrays.
///
/// Values are written as shortest round-trip decimal `f64`, so a
/// save/load cycle is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(kind: &str, config: serde_json::Value, store: &ParamStore<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config,
            params: store
                .names
                .iter()
                .zip(&store.tensors)
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|x| x.to_f64_lossy()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for rec in &self.params {
            let t = Tensor::new(rec.shape.clone(), rec.values.iter().map(|&x| T::of(x)).collect())?;
            store.insert(rec.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Op, Tape};
use super::{Result, Tensor, TensorError};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Ordered named parameter table. Insertion order is the checkpoint order.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                kernel: "param_store",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        let n = t.values.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: t.shape,
            value: t.values,
            grad: vec![0.0; n],
            trainable: true,
        });
        Ok(())
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), values)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![v; n])?)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn get_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks every parameter non-trainable: tapes then load them as constants.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Adds the leaf gradients recorded on `tape` for this store's parameters.
    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        let nodes = tape.nodes.borrow();
        for node in nodes.iter() {
            if let Op::Param { store, index } = node.op {
                if store != self.id {
                    continue;
                }
                let Some(g) = &node.grad else { continue };
                let p = &mut self.params[index];
                if !p.trainable {
                    return Err(TensorError::FrozenGradient(p.name.clone()));
                }
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Flattened copy of all values in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    Tensor {
                        shape: p.shape.clone(),
                        values: p.value.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn from_tensors(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut s = Self::new();
        for (name, t) in entries {
            s.insert(&name, t)?;
        }
        Ok(s)
    }
}

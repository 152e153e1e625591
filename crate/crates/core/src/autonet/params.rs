use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{load_tensor, store_tensor, TensorFile};
use crate::scalar::Scalar;

use super::{NetError, Tensor};

const INDEX_FILE: &str = "index.json";

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::lit(rng.random_range(-limit..limit));
    }
    t
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    dims: Vec<usize>,
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NetError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Writes one IFNT file per tensor plus `index.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", dir.display())))?;
        let mut index = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{}.ifnt", name.replace('/', "."));
            let tf = TensorFile::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v.as_f64() as f32).collect(),
            )?;
            store_tensor(&tf, dir.join(&file))?;
            index.insert(
                name.clone(),
                IndexEntry {
                    file,
                    dims: t.shape().to_vec(),
                },
            );
        }
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), json)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", dir.display())))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, NetError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(INDEX_FILE)).map_err(|e| {
            NetError::Checkpoint(format!("{}: {e}", dir.join(INDEX_FILE).display()))
        })?;
        let index: BTreeMap<String, IndexEntry> =
            serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let mut store = Self::new();
        for (name, entry) in index {
            let tf = load_tensor(dir.join(&entry.file))?;
            if tf.dims != entry.dims {
                return Err(NetError::Checkpoint(format!(
                    "{name}: index dims {:?} but file holds {:?}",
                    entry.dims, tf.dims
                )));
            }
            let data = tf.data.iter().map(|&v| T::lit(v as f64)).collect();
            store.insert(name, Tensor::new(tf.dims, data)?);
        }
        Ok(store)
    }

    /// Fails unless `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<(), NetError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(NetError::Checkpoint(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b || ta.shape() != tb.shape() {
                return Err(NetError::Checkpoint(format!(
                    "{a} {:?} does not match {b} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

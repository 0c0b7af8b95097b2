use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `specs` from a single seeded stream, in spec order.
    pub fn initialize(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { std } => {
                    let normal = Normal::new(0.0, std)
                        .map_err(|e| Error::Config(format!("{}: {e}", spec.name)))?;
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            // Round through f32 so f32 and f64 stores hold the same values.
            let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
            let t = Tensor::from_vec(data, spec.shape.as_slice(), device)?.to_dtype(dtype)?;
            store.insert(spec.name.clone(), t);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::elem_count).sum()
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.values().next().map(Tensor::dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (name, t) in &self.tensors {
            out.insert(name.clone(), t.to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// Deep copy with fresh storage, detached from any autograd graph.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (name, t) in &self.tensors {
            out.insert(name.clone(), t.detach().copy()?);
        }
        Ok(out)
    }

    /// Content fingerprint over names, shapes and f32 values.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut hasher = DefaultHasher::new();
        for (name, t) in &self.tensors {
            name.hash(&mut hasher);
            t.dims().hash(&mut hasher);
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                v.to_bits().hash(&mut hasher);
            }
        }
        Ok(hasher.finish())
    }

    /// True when every tensor in `self` has a bit-identical twin in `other`.
    pub fn bit_identical(&self, other: &ParamStore) -> Result<bool> {
        if self.len() != other.len() {
            return Ok(false);
        }
        for (name, t) in &self.tensors {
            let Ok(o) = other.get(name) else {
                return Ok(false);
            };
            if !tensors_bit_identical(t, o)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn tensors_bit_identical(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let a = a.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let b = b.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}

//! Named parameter storage with per-entry trainability.
//!
//! Every weight and buffer lives in a [`Var`] keyed by its torchvision-style
//! name. Layers fetch tensors through [`ParamStore::tensor`], which hands out
//! graph-tracked tensors only for trainable weights; everything else is
//! detached, so frozen parameters never receive gradients.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Learnable parameter.
    Weight,
    /// Running statistic; updated by batch normalization in training mode only.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    role: Role,
    trainable: bool,
}

/// Counts of scalar weights by trainability (buffers excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Census {
    pub trainable: usize,
    pub frozen: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Deep copy of every entry, used to keep the best-epoch weights in memory.
#[derive(Debug, Clone)]
pub struct Snapshot(BTreeMap<String, Tensor>);

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Result<Self> {
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Validation(format!("unsupported dtype {dtype:?}")));
        }
        Ok(Self {
            dtype,
            entries: BTreeMap::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    /// Insert or replace an entry. New entries start trainable.
    pub fn insert(&mut self, name: &str, tensor: Tensor, role: Role) -> Result<()> {
        let tensor = tensor.to_dtype(self.dtype)?.contiguous()?;
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var,
                role,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no parameter named {name}")))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.entry(name)?.var.dims().to_vec())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        Ok(&self.entry(name)?.var)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        let e = self.entry(name)?;
        Ok(e.role == Role::Weight && e.trainable)
    }

    /// Tensor for use in a forward pass: tracked only when trainable.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        if e.role == Role::Weight && e.trainable {
            Ok(e.var.as_tensor().clone())
        } else {
            Ok(e.var.as_tensor().detach())
        }
    }

    pub fn set_trainable(&mut self, mut select: impl FnMut(&str) -> bool, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if select(name) {
                e.trainable = trainable;
            }
        }
    }

    /// Trainable weights in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.role == Role::Weight && e.trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.role == Role::Weight && e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for e in self.entries.values().filter(|e| e.role == Role::Weight) {
            if e.trainable {
                c.trainable += e.var.elem_count();
            } else {
                c.frozen += e.var.elem_count();
            }
        }
        c
    }

    /// SHA-256 over name, shape and little-endian values of every selected
    /// entry (weights and buffers), in name order.
    pub fn checksum(&self, mut select: impl FnMut(&str) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, e) in &self.entries {
            if !select(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in e.var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hash_values(&mut hasher, e.var.as_tensor())?;
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.var.as_tensor().copy()?.detach());
        }
        Ok(Snapshot(out))
    }

    /// Overwrite values in place from a snapshot of the same layout.
    pub fn restore(&self, snapshot: &Snapshot) -> Result<()> {
        for (name, e) in &self.entries {
            let t = snapshot
                .0
                .get(name)
                .ok_or_else(|| Error::Validation(format!("snapshot lacks {name}")))?;
            e.var.set(t)?;
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().detach()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Copy every entry's value from a safetensors file. Extra tensors in the
    /// file are ignored; missing or mis-shaped ones are errors.
    pub fn load_safetensors(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.load_map(&tensors, path)
    }

    pub(crate) fn load_map(&self, tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
        for (name, e) in &self.entries {
            let t = tensors.get(name).ok_or_else(|| Error::Weights {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name}"),
                hint: String::new(),
            })?;
            if t.dims() != e.var.dims() {
                return Err(Error::Weights {
                    path: path.to_path_buf(),
                    reason: format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), e.var.dims()),
                    hint: String::new(),
                });
            }
            e.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

fn hash_values(hasher: &mut Sha256, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Initialization schemes used by the reference architectures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan)`.
    KaimingNormal {
        fan: usize,
    },
    /// Uniform on `[-bound, bound]`.
    Uniform {
        bound: f64,
    },
    Const(f64),
}

impl Init {
    /// Default affine-layer initialization: `U(±1/sqrt(fan_in))`.
    pub fn linear_default(fan_in: usize) -> Init {
        Init::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        }
    }

    pub fn sample(self, shape: &[usize], rng: &mut Rng, dtype: DType) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match self {
            Init::KaimingNormal { fan } => {
                let std = (2.0 / fan as f64).sqrt();
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Const(c) => vec![c; n],
        };
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Declarative parameter list entry for an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub role: Role,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            role: Role::Weight,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Const(value),
            role: Role::Buffer,
        }
    }
}

/// Materialize a parameter list in order, drawing from `rng`.
pub fn instantiate(store: &mut ParamStore, specs: &[ParamSpec], rng: &mut Rng) -> Result<()> {
    for spec in specs {
        let t = spec.init.sample(&spec.shape, rng, store.dtype())?;
        store.insert(&spec.name, t, spec.role)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_entries_are_detached() {
        let mut store = ParamStore::new(DType::F32).unwrap();
        let t = Tensor::ones(3, DType::F32, &Device::Cpu).unwrap();
        store.insert("a", t.clone(), Role::Weight).unwrap();
        store.insert("b", t, Role::Weight).unwrap();
        store.set_trainable(|n| n == "b", false);
        assert_eq!(store.trainable_names(), vec!["a".to_string()]);
        assert!(store.tensor("a").unwrap().is_variable());
        assert!(!store.tensor("b").unwrap().is_variable());
        assert_eq!(
            store.census(),
            Census {
                trainable: 3,
                frozen: 3
            }
        );
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut store = ParamStore::new(DType::F32).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        instantiate(
            &mut store,
            &[ParamSpec::weight("w", &[4, 2], Init::KaimingNormal { fan: 2 })],
            &mut rng,
        )
        .unwrap();
        let before = store.checksum(|_| true).unwrap();
        let snap = store.snapshot().unwrap();
        store
            .var("w")
            .unwrap()
            .set(&Tensor::zeros((4, 2), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert_ne!(store.checksum(|_| true).unwrap(), before);
        store.restore(&snap).unwrap();
        assert_eq!(store.checksum(|_| true).unwrap(), before);
    }

    #[test]
    fn kaiming_normal_scale() {
        let mut rng = Rng::seed_from_u64(1);
        let t = Init::KaimingNormal { fan: 50 }
            .sample(&[20_000], &mut rng, DType::F64)
            .unwrap();
        let v = t.to_vec1::<f64>().unwrap();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.002, "{var}");
    }
}

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noising::mix_seed;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Named parameters with deterministic, order-independent initialization:
/// every tensor draws from its own stream seeded by (store seed, name).
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    /// Reject names that were not preloaded.
    strict: bool,
    accessed: BTreeSet<String>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
            strict: false,
            accessed: BTreeSet::new(),
        }
    }

    /// Preloads every tensor from a safetensors file; later lookups must hit.
    pub fn from_safetensors(path: &Path, dtype: DType) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut store = Self::new(0, dtype);
        for (name, t) in tensors {
            store.vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        store.strict = true;
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.accessed.insert(name.to_string());
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        if self.strict {
            return Err(Error::Integrity(format!("parameter {name} missing from checkpoint")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name_hash(name)));
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Drops preloaded tensors that no lookup asked for.
    pub fn retain_accessed(&mut self) {
        let accessed = &self.accessed;
        self.vars.retain(|k, _| accessed.contains(k));
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        h.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites existing parameters in place from a safetensors file. The
    /// file must hold exactly this store's names and shapes.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        if tensors.len() != self.vars.len() {
            return Err(Error::Integrity(format!(
                "{} holds {} tensors, expected {}",
                path.display(),
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Integrity(format!("{} lacks parameter {name}", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Integrity(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies of all current values, for snapshot/restore.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let t = snapshot
                .get(k)
                .ok_or_else(|| Error::Integrity(format!("snapshot lacks {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(5, DType::F32);
        let mut b = ParamStore::new(5, DType::F32);
        let x1 = a.get("x", &[3, 2], Init::Normal(0.02)).unwrap();
        a.get("y", &[4], Init::Normal(0.02)).unwrap();
        b.get("y", &[4], Init::Normal(0.02)).unwrap();
        let x2 = b.get("x", &[3, 2], Init::Normal(0.02)).unwrap();
        assert_eq!(
            x1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParamStore::new(1, DType::F32);
        let v = a.get("w", &[2], Init::Const(1.0)).unwrap();
        let before = a.checksum().unwrap();
        v.set(&Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert_ne!(before, a.checksum().unwrap());
    }

    #[test]
    fn shape_mismatch_is_integrity_error() {
        let mut a = ParamStore::new(1, DType::F32);
        a.get("w", &[2], Init::Const(0.0)).unwrap();
        assert!(matches!(a.get("w", &[3], Init::Const(0.0)), Err(Error::Integrity(_))));
    }
}

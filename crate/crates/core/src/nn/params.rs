use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// PyTorch-style default for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

struct Inner {
    vars: BTreeMap<String, Var>,
    source: Option<HashMap<String, Tensor>>,
    seed: u64,
}

/// Each parameter draws from its own stream keyed by name, so adding or removing a
/// module leaves the initial values of the others unchanged.
fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Named, ordered collection of trainable tensors.
///
/// Parameters are created through [`ParamScope::get`]; when the store was
/// opened from a checkpoint the stored values are used instead of the
/// initializer, after a shape check.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("n_params", &self.names().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                source: None,
                seed,
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    /// A store that pulls every parameter from `tensors`.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        let store = Self::new(0, dtype);
        store.lock().source = Some(tensors);
        store
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamScope<'_> {
        ParamScope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.lock()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameter values from a snapshot with identical names and shapes.
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, var) in &inner.vars {
            let value = snapshot
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks {name}")))?;
            var.set(value)?;
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    /// Order-sensitive checksum over all parameters whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, var) in self.lock().vars.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            let vals = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in vals {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        Ok(h)
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(v) = inner.vars.get(&name) {
            return Ok(v.as_tensor().clone());
        }
        let tensor = if let Some(src) = &inner.source {
            let t = src
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != &shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?} != expected {:?}",
                    t.dims(),
                    shape.dims()
                )));
            }
            t.to_dtype(self.dtype)?
        } else {
            let n = shape.elem_count();
            let rng = &mut name_rng(inner.seed, &name);
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::TruncNormal(std) => (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect(),
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            };
            Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
        };
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(t)
    }
}

/// A dotted name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct ParamScope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamScope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamScope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamScope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible_and_truncated() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let ta = a.root().pp("x").get((64, 64), "w", Init::TruncNormal(0.02)).unwrap();
        let tb = b.root().pp("x").get((64, 64), "w", Init::TruncNormal(0.02)).unwrap();
        let va = ta.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, tb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(va.iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert_eq!(a.names(), vec!["x.w".to_string()]);

        // creation order and unrelated parameters do not change a parameter's values
        let c = ParamStore::new(7, DType::F32);
        c.root().get((3, 3), "other", Init::TruncNormal(0.02)).unwrap();
        let tc = c.root().pp("x").get((64, 64), "w", Init::TruncNormal(0.02)).unwrap();
        assert_eq!(va, tc.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let d = ParamStore::new(8, DType::F32);
        let td = d.root().pp("x").get((64, 64), "w", Init::TruncNormal(0.02)).unwrap();
        assert_ne!(va, td.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn loading_checks_shapes() {
        let mut src = HashMap::new();
        src.insert(
            "w".to_string(),
            Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap(),
        );
        let s = ParamStore::from_tensors(src.clone(), DType::F32);
        assert!(s.root().get((2, 3), "w", Init::Ones).is_ok());
        let s = ParamStore::from_tensors(src, DType::F32);
        assert!(s.root().get((3, 2), "w", Init::Ones).is_err());
        assert!(s.root().get(3, "b", Init::Ones).is_err());
    }
}

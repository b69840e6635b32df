//! Parameter storage, deterministic initialization and checkpoint files.
//!
//! Every learnable tensor and every normalization buffer lives in a
//! [`ParamStore`] under a dotted key such as `backbone.stage2.block0.conv1.weight`.
//! Modules obtain their tensors through a [`Scope`], which prefixes keys the
//! same way the checkpoint is laid out on disk.
//!
//! A store can also be created in shape-only mode. It then hands out
//! broadcast views of a single zero scalar, so very large networks can be
//! constructed, described and profiled without allocating their weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He/Kaiming normal for ReLU networks, `std = sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Const(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a model parameter.
    Trainable,
    /// Persistent state such as BatchNorm running statistics.
    Buffer,
}

#[derive(Debug)]
struct Entry {
    kind: ParamKind,
    shape: Shape,
    var: Option<Var>,
}

#[derive(Debug)]
struct Inner {
    entries: Mutex<BTreeMap<String, Entry>>,
    seed: u64,
    dtype: DType,
    device: Device,
    shape_only: bool,
}

/// Shared, cheaply clonable handle to a set of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

impl ParamStore {
    /// A store that allocates real variables, initialized from `seed`.
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::with_mode(seed, dtype, device, false)
    }

    /// A store that records shapes only. Trainable tensors are zero views
    /// without backing memory; buffers are small real allocations.
    pub fn shape_only(dtype: DType) -> Self {
        Self::with_mode(0, dtype, &Device::Cpu, true)
    }

    fn with_mode(seed: u64, dtype: DType, device: &Device, shape_only: bool) -> Self {
        Self {
            inner: Arc::new(Inner {
                entries: Mutex::new(BTreeMap::new()),
                seed,
                dtype,
                device: device.clone(),
                shape_only,
            }),
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn is_shape_only(&self) -> bool {
        self.inner.shape_only
    }

    fn entries(&self) -> MutexGuard<'_, BTreeMap<String, Entry>> {
        self.inner.entries.lock().expect("parameter store poisoned")
    }

    fn fetch(&self, name: &str, shape: Shape, kind: ParamKind, init: Init) -> Result<Tensor> {
        let mut entries = self.entries();
        if let Some(entry) = entries.get(name) {
            if entry.shape != shape {
                return Err(Error::config(format!(
                    "parameter {name} requested with shape {shape:?} but already registered as {:?}",
                    entry.shape
                )));
            }
            return Ok(match &entry.var {
                Some(v) => v.as_tensor().clone(),
                None => zero_view(&shape, self.inner.dtype, &self.inner.device)?,
            });
        }
        let materialize = !self.inner.shape_only || kind == ParamKind::Buffer;
        let (var, tensor) = if materialize {
            let values = sample_init(self.inner.seed, name, shape.elem_count(), init)?;
            let t = Tensor::from_vec(values, shape.clone(), &self.inner.device)?
                .to_dtype(self.inner.dtype)?;
            let var = Var::from_tensor(&t)?;
            let t = var.as_tensor().clone();
            (Some(var), t)
        } else {
            (None, zero_view(&shape, self.inner.dtype, &self.inner.device)?)
        };
        entries.insert(name.to_string(), Entry { kind, shape, var });
        Ok(tensor)
    }

    fn fetch_var(&self, name: &str) -> Option<Var> {
        self.entries().get(name).and_then(|e| e.var.clone())
    }

    /// Trainable variables in key order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars_of(Some(ParamKind::Trainable))
    }

    /// Every materialized variable (trainable and buffers) in key order.
    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_of(None)
    }

    fn vars_of(&self, kind: Option<ParamKind>) -> Vec<(String, Var)> {
        self.entries()
            .iter()
            .filter(|(_, e)| kind.is_none_or(|k| e.kind == k))
            .filter_map(|(k, e)| e.var.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    /// Registered keys with their kind and shape.
    pub fn layout(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        self.entries()
            .iter()
            .map(|(k, e)| (k.clone(), e.kind, e.shape.dims().to_vec()))
            .collect()
    }

    /// Total element count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries()
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.shape.elem_count())
            .sum()
    }

    /// Writes every variable to a safetensors file with string metadata.
    pub fn save(&self, path: impl AsRef<Path>, metadata: HashMap<String, String>) -> Result<()> {
        if self.inner.shape_only {
            return Err(Error::config("cannot save a shape-only parameter store"));
        }
        let vars = self.all_vars();
        let tensors: Vec<(String, Tensor)> = vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?.contiguous()?)))
            .collect::<Result<_>>()?;
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        safetensors::serialize_to_file(
            tensors.iter().map(|(k, t)| (k.as_str(), t)),
            Some(metadata),
            path.as_ref(),
        )?;
        Ok(())
    }

    /// Loads every registered variable from `path`. Missing keys or shape
    /// mismatches are reported as configuration errors naming the first
    /// offending key in sorted order. Returns the file's metadata.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
        self.load_filtered(path, "")
    }

    /// Like [`load`](Self::load) but only touches keys starting with `prefix`.
    pub fn load_prefix(
        &self,
        path: impl AsRef<Path>,
        prefix: &str,
    ) -> Result<HashMap<String, String>> {
        self.load_filtered(path, prefix)
    }

    fn load_filtered(
        &self,
        path: impl AsRef<Path>,
        prefix: &str,
    ) -> Result<HashMap<String, String>> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let metadata = read_metadata(path)?;
        let loaded = candle_core::safetensors::load(path, &self.inner.device)?;
        let targets: Vec<(String, Var)> = self
            .all_vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        for (key, var) in &targets {
            let src = loaded.get(key).ok_or_else(|| {
                Error::config(format!(
                    "checkpoint {} has no entry for layer {key}",
                    path.display()
                ))
            })?;
            if src.dims() != var.dims() {
                return Err(Error::config(format!(
                    "shape mismatch at layer {key}: checkpoint has {:?}, network expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
        }
        for (key, var) in targets {
            var.set(&loaded[&key].to_dtype(self.inner.dtype)?)?;
        }
        Ok(metadata)
    }
}

/// Reads the string metadata block of a safetensors file.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path.as_ref())?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

fn zero_view(shape: &Shape, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?.broadcast_as(shape.clone())?)
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds from names.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sample_init(seed: u64, name: &str, n: usize, init: Init) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    Ok(match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { bound } => {
            if bound <= 0.0 {
                vec![0.0; n]
            } else {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        }
        Init::KaimingNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    })
}

/// A key prefix into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Fetches (creating on first use) a trainable parameter.
    pub fn param(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        self.store
            .fetch(&self.key(name), shape.into(), ParamKind::Trainable, init)
    }

    /// Fetches (creating on first use) a persistent non-trainable buffer.
    pub fn buffer(&self, shape: impl Into<Shape>, name: &str, value: f64) -> Result<Var> {
        let key = self.key(name);
        self.store
            .fetch(&key, shape.into(), ParamKind::Buffer, Init::Const(value))?;
        self.store
            .fetch_var(&key)
            .ok_or_else(|| Error::config(format!("buffer {key} is not materialized")))
    }
}

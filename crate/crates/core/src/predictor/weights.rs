//! Named weight tensors, initialization and the on-disk container.
//!
//! Container layout: magic `SPTB`, `u16` version, `u32` manifest length,
//! a JSON manifest `{seed, config_hash, tensors: [{name, shape}]}`, then one
//! `f64` SPTN record per tensor in manifest order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HeadConfig;
use crate::error::{Error, Result};
use crate::tensor_io::RawTensor;

const CONTAINER_MAGIC: &[u8; 4] = b"SPTB";
const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum InitKind {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Ordered named tensors for one prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
    pub seed: u64,
    pub config_hash: u64,
}

impl WeightBundle {
    pub(crate) fn from_parts(entries: Vec<(String, Tensor)>, seed: u64, config_hash: u64) -> Self {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut lookup = HashMap::with_capacity(entries.len());
        for (i, (n, t)) in entries.into_iter().enumerate() {
            lookup.insert(n.clone(), i);
            names.push(n);
            tensors.push(t);
        }
        WeightBundle { names, tensors, lookup, seed, config_hash }
    }

    /// Same names and shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in &mut z.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn data(&self, name: &str) -> &[f64] {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("weight {name} missing; bundle was not validated against its config"))
            .data
    }

    /// `(weight, bias)` of an affine layer.
    pub(crate) fn linear(&self, prefix: &str) -> (&[f64], &[f64]) {
        (self.data(&format!("{prefix}.weight")), self.data(&format!("{prefix}.bias")))
    }

    /// Mutable `(weight, bias)` (or `(gain, bias)` for norms) pair.
    pub(crate) fn pair_mut(&mut self, first: &str, second: &str) -> (&mut [f64], &mut [f64]) {
        let i = self.lookup[first];
        let j = self.lookup[second];
        assert_ne!(i, j);
        if i < j {
            let (a, b) = self.tensors.split_at_mut(j);
            (&mut a[i].data, &mut b[0].data)
        } else {
            let (a, b) = self.tensors.split_at_mut(i);
            (&mut b[0].data, &mut a[j].data)
        }
    }

    pub(crate) fn linear_mut(&mut self, prefix: &str) -> (&mut [f64], &mut [f64]) {
        self.pair_mut(&format!("{prefix}.weight"), &format!("{prefix}.bias"))
    }

    pub(crate) fn norm_mut(&mut self, prefix: &str) -> (&mut [f64], &mut [f64]) {
        self.pair_mut(&format!("{prefix}.gain"), &format!("{prefix}.bias"))
    }

    /// `self += scale · other` tensor by tensor.
    pub fn add_scaled(&mut self, other: &WeightBundle, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Manifest `(name, shape)` pairs in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect()
    }

    /// Checks names and shapes against the layout `config` requires.
    pub fn validate(&self, config: &HeadConfig) -> Result<()> {
        let layout = config.tensor_layout();
        for (name, shape, _) in &layout {
            match self.get(name) {
                None => {
                    return Err(Error::ShapeMismatch { name: name.clone(), reason: "tensor missing".into() })
                }
                Some(t) if &t.shape != shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        reason: format!("shape {:?}, config expects {:?}", t.shape, shape),
                    })
                }
                Some(t) if t.data.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::ShapeMismatch { name: name.clone(), reason: "non-finite entries".into() })
                }
                Some(_) => {}
            }
        }
        if layout.len() != self.len() {
            let extra = self
                .names
                .iter()
                .find(|n| !layout.iter().any(|(l, _, _)| l == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::ShapeMismatch { name: extra, reason: "tensor not used by this config".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config_hash: u64,
    tensors: Vec<ManifestEntry>,
}

/// Deterministic initialization: affine weights `N(0, 2/fan_in)`, biases 0,
/// norm gains 1.
pub fn init_weights(config: &HeadConfig, seed: u64) -> Result<WeightBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape, kind) in config.tensor_layout() {
        let mut t = Tensor::zeros(shape);
        match kind {
            InitKind::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            InitKind::Ones => t.data.iter_mut().for_each(|v| *v = 1.0),
            InitKind::Zeros => {}
        }
        entries.push((name, t));
    }
    Ok(WeightBundle::from_parts(entries, seed, config.hash()))
}

pub fn save_weights(weights: &WeightBundle, path: &Path) -> Result<()> {
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    let manifest = Manifest {
        seed: weights.seed,
        config_hash: weights.config_hash,
        tensors: weights
            .iter()
            .map(|(n, t)| ManifestEntry { name: n.to_string(), shape: t.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(CONTAINER_MAGIC).map_err(io_err)?;
    w.write_u16::<LittleEndian>(CONTAINER_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(json.len() as u32).map_err(io_err)?;
    w.write_all(&json).map_err(io_err)?;
    for (_, t) in weights.iter() {
        RawTensor::f64(t.shape.clone(), t.data.clone()).write_to(&mut w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads a container and validates it against `config`.
pub fn load_weights(path: &Path, config: &HeadConfig) -> Result<WeightBundle> {
    let ctx = path.display().to_string();
    let malformed = |reason: String| Error::MalformedHeader { context: ctx.clone(), reason };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| malformed(format!("truncated magic: {e}")))?;
    if &magic != CONTAINER_MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| malformed(e.to_string()))?;
    if version != CONTAINER_VERSION {
        return Err(malformed(format!("unsupported container version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| malformed(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| malformed(format!("truncated manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| malformed(e.to_string()))?;
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let t = RawTensor::read_from(&mut r, &format!("{ctx} tensor {}", entry.name))?;
        if t.dims != entry.shape {
            return Err(malformed(format!("tensor {} stored as {:?}, manifest says {:?}", entry.name, t.dims, entry.shape)));
        }
        entries.push((entry.name, Tensor { shape: t.dims.clone(), data: t.to_f64() }));
    }
    let bundle = WeightBundle::from_parts(entries, manifest.seed, manifest.config_hash);
    bundle.validate(config)?;
    Ok(bundle)
}

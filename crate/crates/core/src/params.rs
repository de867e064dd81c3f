//! Named parameters, their initialization, and the KCKP checkpoint format.
//!
//! Checkpoint layout (little-endian): `"KCKP"` · version `u32` = 1 ·
//! entry count `u32` · entries of (name length `u16`, UTF-8 name, KTEN record).

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::io::{write_tensor, ByteReader};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"KCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        self.params[id.0]
            .grad
            .data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            write_tensor(&mut out, &p.value).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::file(path, e))
    }

    /// Overwrites every parameter value from a checkpoint. The checkpoint must
    /// hold exactly this store's names with matching shapes.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = read_checkpoint(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} entries, model has {} parameters",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name} in checkpoint")))?;
            let p = self.param_mut(id);
            if p.value.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = tensor;
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        self.load_checkpoint_bytes(&bytes)
    }

    pub(crate) fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub(crate) fn restore(&mut self, values: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Decodes a checkpoint into (name, tensor) pairs in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CKPT_MAGIC)?;
    let version = r.u32("checkpoint version")?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "KCKP",
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        entries.push((name, r.tensor()?));
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes after checkpoint", r.remaining()),
        });
    }
    Ok(entries)
}

/// Registers parameters with seeded initial values.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, std: f64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    /// Normal(0, std²) truncated to ±2 std by resampling.
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.weight_with_std(name, shape, self.std)
    }

    /// Like [`weight`](Self::weight) with `std = 1/sqrt(shape[0])`.
    pub fn fan_in_weight(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        self.weight_with_std(name, shape, (fan_in as f64).sqrt().recip())
    }

    pub fn weight_with_std(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        });
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, 1.0))
    }
}

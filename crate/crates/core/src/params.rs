//! Flat parameter registry and its on-disk named-tensor container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PIIPNT01"
//! count    u64
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 x ndim
//!   data     f64 x prod(dims)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PIIPNT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a container. Every tensor is registered with `decay = false`;
    /// use [`ParamStore::load_values`] to restore into an existing model layout.
    pub fn read_from<R: Read>(mut r: R) -> Result<ParamStore> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let count = read_u64(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if store.index.contains_key(&name) {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
            store.add(name, Tensor::new(shape, data)?, false);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        ParamStore::read_from(BufReader::new(File::open(path)?))
    }

    /// Overwrites every tensor of `self` with the same-named, same-shaped tensor of `other`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for i in 0..self.tensors.len() {
            let src = other
                .by_name(&self.names[i])
                .ok_or_else(|| Error::Format(format!("missing tensor `{}`", self.names[i])))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub(crate) grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Deterministic parameter initialization.
///
/// A `shape_only` initializer fills every tensor with zeros or constants and
/// never touches the RNG; it exists to size very large models cheaply.
pub struct Initializer {
    rng: Option<ChaCha8Rng>,
}

impl Initializer {
    pub fn seeded(seed: u64) -> Self {
        Initializer { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn shape_only() -> Self {
        Initializer { rng: None }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_mut() {
            for v in t.data_mut() {
                *v = loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                };
            }
        }
        t
    }

    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap(), true);
        store.add("b", Tensor::new(vec![1], vec![0.125]).unwrap(), false);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.by_name("a.weight").unwrap(), store.by_name("a.weight").unwrap());
        assert_eq!(back.name(ParamId(1)), "b");
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(matches!(ParamStore::read_from(&b"NOTMAGIC"[..]), Err(Error::Format(_))));
        assert!(ParamStore::read_from(&b"PII"[..]).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let a = Initializer::seeded(3).trunc_normal(vec![1000], 0.02);
        let b = Initializer::seeded(3).trunc_normal(vec![1000], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        assert!(Initializer::shape_only().trunc_normal(vec![10], 1.0).data().iter().all(|&v| v == 0.0));
    }
}

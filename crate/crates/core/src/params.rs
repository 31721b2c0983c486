//! Named parameter storage, its on-disk container, and seeded initialisation.
//!
//! # Container format (version 1)
//!
//! All integers little-endian.
//!
//! ```text
//! magic    8 bytes   "DKIPARAM"
//! version  u32       1
//! count    u32       number of entries
//! entry*   (sorted by name)
//!   name_len u32, name utf-8 bytes
//!   rank     u32, dims u64 * rank
//!   payload  f64 * prod(dims), row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKIPARAM";
pub const FORMAT_VERSION: u32 = 1;

/// Trainable tensors keyed by name; iteration is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a new parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "replace",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform on `(-bound, bound)`; `None` means `1/sqrt(last axis)`.
    Uniform(Option<f64>),
    Normal { std: f64 },
    Zeros,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform(None)
    }
}

/// Reproducible initialisation: identical `(shape, seed, scheme)` give
/// identical tensors.
pub fn seeded_init(shape: &[usize], seed: u64, scheme: InitScheme) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = match scheme {
        InitScheme::Uniform(bound) => {
            let fan = *shape.last().unwrap_or(&1) as f64;
            let a = bound.unwrap_or(1.0 / fan.sqrt());
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
        InitScheme::Normal { std } => {
            let dist = Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("normal init: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        InitScheme::Zeros => vec![0.0; n],
    };
    Tensor::new(shape.to_vec(), data)
}

/// Stable 64-bit mix of a master seed with a label (FNV-1a over the label),
/// used to derive independent per-parameter and per-subsystem seeds.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finaliser
    let mut z = h ^ master.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Named parameters, Adam state and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DSSD"            magic
//! u32               format version
//! u32 + utf-8       resolved run configuration
//! u32               parameter count
//! per parameter, in name order:
//!   u32 + utf-8     name
//!   u32, u32 × n    rank and dims
//!   f64 × len       values, then first moments, then second moments
//!   u64             optimizer step counter
//! ```

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSSD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    /// Logical shape, e.g. `[out, in, k]` for a kernel stored as `[out × in·k]`.
    pub dims: Vec<usize>,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, value: Tensor) -> Result<()> {
        if dims.iter().product::<usize>() != value.len() {
            return Err(Error::invalid(format!(
                "parameter `{name}`: dims {dims:?} do not match {} values",
                value.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.params.insert(
            name.to_string(),
            Param {
                dims,
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn add_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?
            .value
            .accumulate_grad(grad)
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.value.clear_grad());
    }

    /// One Adam update with bias correction. Every parameter must hold a gradient;
    /// gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.value.grad().is_none()) {
            return Err(Error::State(format!(
                "adam step without a gradient for `{name}`"
            )));
        }
        for p in self.params.values_mut() {
            let g = p.value.take_grad().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, config_text);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
            for &d in &p.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for buf in [p.value.data(), &p.m, &p.v] {
                for &x in buf {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            out.extend_from_slice(&p.step.to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint, returning the store and the embedded configuration text.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r.f64s(n)?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            let step = r.u64()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [first, rest @ ..] => (*first, rest.iter().product()),
            };
            store.insert(&name, dims, Tensor::from_vec(rows, cols, data)?)?;
            let p = store.params.get_mut(&name).expect("just inserted");
            p.m = m;
            p.v = v;
            p.step = step;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok((store, config))
    }
}

/// Uniform in `[−s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-s..=s)).collect()
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not valid utf-8".into()))
    }
}

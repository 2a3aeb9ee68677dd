//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian: magic `FWF1`, u32 version, u32 array
//! count, then per array a u16 name length, the UTF-8 name, a u8 dtype code,
//! a u8 rank, one u32 per dimension, the row-major payload and a u64
//! checksum. A trailer holds the u64 step counter and the u32-length-prefixed
//! config echo. Optimizer moments are ordinary arrays under `optim.m.` and
//! `optim.v.` prefixes.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::Adam;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::prefix_u64;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FWF1";
pub const VERSION: u32 = 1;
const FIRST_MOMENT: &str = "optim.m.";
const SECOND_MOMENT: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub arrays: Vec<NamedArray<T>>,
    pub step: u64,
    pub config: String,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of every parameter, plus optimizer moments when given.
    pub fn capture(store: &ParamStore<T>, optimizer: Option<&Adam<T>>, step: u64, config: &str) -> Self {
        let mut arrays: Vec<NamedArray<T>> = store
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name().to_string(),
                value: p.value().clone(),
            })
            .collect();
        if let Some(opt) = optimizer {
            for (prefix, moments) in [(FIRST_MOMENT, opt.first_moments()), (SECOND_MOMENT, opt.second_moments())] {
                arrays.extend(store.iter().zip(moments).map(|((_, p), m)| NamedArray {
                    name: format!("{prefix}{}", p.name()),
                    value: m.clone(),
                }));
            }
        }
        Self {
            arrays,
            step,
            config: config.to_string(),
        }
    }

    /// Model parameter arrays, without optimizer state.
    pub fn parameters(&self) -> impl Iterator<Item = &NamedArray<T>> {
        self.arrays.iter().filter(|a| !is_optimizer_array(&a.name))
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.arrays.iter().any(|a| is_optimizer_array(&a.name))
    }

    /// Copies parameters into `store`. Every store parameter must be present
    /// with a matching shape and no extra parameter may appear.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor<T>> = HashMap::new();
        for a in self.parameters() {
            if store.find(&a.name).is_none() {
                return Err(Error::Checkpoint(format!("unknown array '{}' for this model", a.name)));
            }
            by_name.insert(&a.name, &a.value);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            let name = store.get(*id).name();
            let value = by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("array '{name}' missing from checkpoint")))?;
            if value.shape() != store.value(*id).shape() {
                return Err(Error::Checkpoint(format!(
                    "array '{name}' has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.value(*id).shape()
                )));
            }
        }
        for id in ids {
            let value = (*by_name[store.get(id).name()]).clone();
            store.set_value(id, value)?;
        }
        Ok(())
    }

    /// Restores optimizer moments saved alongside the parameters.
    pub fn restore_optimizer(&self, store: &ParamStore<T>, optimizer: &mut Adam<T>) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = self.arrays.iter().map(|a| (a.name.as_str(), &a.value)).collect();
        let gather = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            store
                .iter()
                .map(|(_, p)| {
                    let name = format!("{prefix}{}", p.name());
                    by_name
                        .get(name.as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| Error::Checkpoint(format!("array '{name}' missing from checkpoint")))
                })
                .collect()
        };
        optimizer.set_state(gather(FIRST_MOMENT)?, gather(SECOND_MOMENT)?, self.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.arrays.len()).map_err(|_| too_large("array count"))?.to_le_bytes());
        for a in &self.arrays {
            let start = out.len();
            let name = a.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_large(&a.name))?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(T::DTYPE);
            out.push(u8::try_from(a.value.rank()).map_err(|_| too_large(&a.name))?);
            for &d in a.value.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large(&a.name))?.to_le_bytes());
            }
            for &x in a.value.data() {
                x.write_le(&mut out);
            }
            let sum = checksum(&out[start..]);
            out.extend_from_slice(&sum.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let config = self.config.as_bytes();
        out.extend_from_slice(&u32::try_from(config.len()).map_err(|_| too_large("config echo"))?.to_le_bytes());
        out.extend_from_slice(config);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes (expected FWF1)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let start = r.pos;
            let context = format!("array #{i}");
            let len = r.u16(&context)? as usize;
            let name = std::str::from_utf8(r.take(len, &context)?)
                .map_err(|_| Error::Checkpoint(format!("{context}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8(&name)?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "array '{name}' has dtype code {dtype}, expected {}",
                    T::DTYPE
                )));
            }
            let rank = r.u8(&name)? as usize;
            let shape = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let payload = n
                .and_then(|n| n.checked_mul(T::BYTES))
                .ok_or_else(|| Error::Checkpoint(format!("array '{name}' has an impossible shape {shape:?}")))?;
            let raw = r.take(payload, &name)?;
            let expected = checksum(&bytes[start..r.pos]);
            if r.u64(&name)? != expected {
                return Err(Error::Checkpoint(format!("checksum mismatch in array '{name}'")));
            }
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let value = Tensor::from_parts(shape, data)?;
            arrays.push(NamedArray { name, value });
        }
        let step = r.u64("trailer")?;
        let len = r.u32("trailer")? as usize;
        let config = std::str::from_utf8(r.take(len, "config echo")?)
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after config echo", bytes.len() - r.pos)));
        }
        Ok(Self { arrays, step, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn is_optimizer_array(name: &str) -> bool {
    name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT)
}

fn checksum(bytes: &[u8]) -> u64 {
    prefix_u64(&Sha256::digest(bytes))
}

fn too_large(what: &str) -> Error {
    Error::Checkpoint(format!("{what} does not fit the checkpoint format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {context}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

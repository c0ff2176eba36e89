//! Named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSEG" | version: u32 | record*
//! record = name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | dims: u64 * rank | values
//! ```
//!
//! Records run to the end of the file. Optimizer moments are stored as
//! `optim.m/<param>` and `optim.v/<param>`, the optimizer step as
//! `optim.step` and the training iteration as `train.iter`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const VERSION: u32 = 1;

const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";
const OPTIM_STEP: &str = "optim.step";
const TRAIN_ITER: &str = "train.iter";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values in `dtype`.
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self { name: name.to_string(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    /// Values converted to `T` when the stored precision differs.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks_exact(size).map(T::read_le).collect(),
            DType::F32 => self.bytes.chunks_exact(size).map(|b| T::c(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(size).map(|b| T::c(f64::read_le(b))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every model parameter must be present with its exact shape and no
    /// unknown parameter records may appear.
    Strict,
    /// Load what matches by name and shape; skip the rest.
    NonStrict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters with no record.
    pub missing: Vec<String>,
    /// Records not loaded: unknown name or shape mismatch.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn is_aux(name: &str) -> bool {
    name.starts_with(OPTIM_M) || name.starts_with(OPTIM_V) || name == OPTIM_STEP || name == TRAIN_ITER
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.records.push(Record::from_tensor(name, t));
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut c = Self::default();
        for (_, e) in store.iter() {
            c.push(&e.name, &e.value);
        }
        c
    }

    /// Adds optimizer moments, step count and the training iteration.
    pub fn add_training_state<T: Scalar>(&mut self, store: &ParamStore<T>, opt: &AdamW<T>, iter: usize) {
        for (id, e) in store.iter() {
            if let Some((m, v)) = opt.moments(id) {
                let shape = e.value.shape().to_vec();
                self.push(&format!("{OPTIM_M}{}", e.name), &Tensor::from_parts(shape.clone(), m.to_vec()));
                self.push(&format!("{OPTIM_V}{}", e.name), &Tensor::from_parts(shape, v.to_vec()));
            }
        }
        self.push(OPTIM_STEP, &Tensor::<f64>::scalar(opt.step as f64));
        self.push(TRAIN_ITER, &Tensor::<f64>::scalar(iter as f64));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.extend((r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend(&r.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic; expected {:?} version {VERSION}", "PSEG")));
        }
        let mut rd = Reader { bytes, pos: 4 };
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads version {VERSION}")));
        }
        let mut records = Vec::new();
        while rd.pos < bytes.len() {
            let n = rd.u32("name length")? as usize;
            let name = std::str::from_utf8(rd.take(n, "name")?)
                .map_err(|_| Error::Checkpoint(format!("record name at byte {} is not utf-8", rd.pos - n)))?
                .to_string();
            let tag = rd.take(1, "dtype")?[0];
            let dtype =
                DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = rd.u32("rank")? as usize;
            let shape = (0..rank).map(|_| rd.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = count
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
            let bytes = rd.take(len, &name)?.to_vec();
            records.push(Record { name, dtype, shape, bytes });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies parameters into `store`. Nothing is written unless the whole
    /// load succeeds.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, mode: LoadMode) -> Result<LoadReport> {
        let by_name: HashMap<&str, &Record> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut report = LoadReport::default();
        let mut staged = Vec::new();
        for (id, e) in store.iter() {
            match by_name.get(e.name.as_str()) {
                None => report.missing.push(e.name.clone()),
                Some(r) if r.shape != e.value.shape() => {
                    if mode == LoadMode::Strict {
                        return Err(Error::Checkpoint(format!(
                            "{}: checkpoint shape {:?} vs model {:?}",
                            e.name,
                            r.shape,
                            e.value.shape()
                        )));
                    }
                    report.skipped.push(e.name.clone());
                }
                Some(r) => {
                    staged.push((id, r.to_tensor::<T>()?));
                    report.loaded.push(e.name.clone());
                }
            }
        }
        for r in &self.records {
            if !is_aux(&r.name) && store.id_of(&r.name).is_none() {
                report.skipped.push(r.name.clone());
            }
        }
        if mode == LoadMode::Strict && !(report.missing.is_empty() && report.skipped.is_empty()) {
            return Err(Error::Checkpoint(format!(
                "strict load: missing {:?}, unexpected {:?}",
                report.missing, report.skipped
            )));
        }
        for (id, t) in staged {
            store.set(id, t)?;
        }
        Ok(report)
    }

    /// Restores optimizer moments and step; returns the stored iteration.
    pub fn load_training_state<T: Scalar>(&self, store: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<usize> {
        let scalar = |name: &str| -> Result<f64> {
            let r = self.get(name).ok_or_else(|| Error::Checkpoint(format!("no {name} record")))?;
            Ok(r.to_tensor::<f64>()?.item())
        };
        let step = scalar(OPTIM_STEP)?;
        let iter = scalar(TRAIN_ITER)?;
        let mut staged = Vec::new();
        for (id, e) in store.iter() {
            let (Some(m), Some(v)) =
                (self.get(&format!("{OPTIM_M}{}", e.name)), self.get(&format!("{OPTIM_V}{}", e.name)))
            else {
                continue;
            };
            if m.shape != e.value.shape() || v.shape != e.value.shape() {
                return Err(Error::Checkpoint(format!("{}: optimizer state shape {:?}", e.name, m.shape)));
            }
            staged.push((id, m.to_tensor::<T>()?.to_vec(), v.to_tensor::<T>()?.to_vec()));
        }
        for (id, m, v) in staged {
            opt.set_moments(id, m, v);
        }
        opt.step = step as u64;
        Ok(iter as usize)
    }
}

//! Versioned binary checkpoints: named f64 tensors plus the originating
//! run configuration and step counter.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  b"JCFCKPT\0"
//! version u32
//! step    u64
//! config  u32 length + UTF-8 JSON of the run configuration
//! count   u32 number of tensors, then per tensor:
//!   name  u32 length + UTF-8 bytes
//!   dims  u32 rank + u64 per dimension
//!   data  product(dims) × f64 (raw IEEE-754 bits)
//! ```
//!
//! Floats are stored bit-for-bit, so save → load round-trips exactly.

use crate::error::{Error, Result};
use crate::model::PoolModel;
use crate::rng::fingerprint;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"JCFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// A named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Format(format!(
                "tensor dims {:?} need {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }
}

/// An on-disk training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_json: String, step: u64) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            step,
            config_json,
            tensors: BTreeMap::new(),
        }
    }

    /// FNV fingerprint of the embedded configuration.
    pub fn config_fingerprint(&self) -> u64 {
        fingerprint(self.config_json.as_bytes())
    }

    /// Fails with the offending tensor name if any entry is NaN/Inf.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let step = r.u64()?;
        let config_len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            tensors.insert(name, Tensor { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            version,
            step,
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Snapshots every parameter tensor of `model` into checkpoint tensors.
pub fn capture_model(model: &PoolModel) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    out.insert(
        "reduction".to_string(),
        Tensor {
            dims: vec![model.reduction.rows(), model.reduction.cols()],
            data: model.reduction.data().to_vec(),
        },
    );
    if let Some(cb) = &model.codebook {
        out.insert(
            "codebook".to_string(),
            Tensor {
                dims: vec![cb.n_words(), cb.dim()],
                data: cb.words().data().to_vec(),
            },
        );
    }
    if let Some(cb) = &model.codebook_q {
        out.insert(
            "codebook_q".to_string(),
            Tensor {
                dims: vec![cb.n_words(), cb.dim()],
                data: cb.words().data().to_vec(),
            },
        );
    }
    if let Some(p) = &model.shared {
        out.insert(
            "u_shared".to_string(),
            Tensor {
                dims: vec![p.u_shared.out_dim(), p.u_shared.dim(), p.u_shared.n_proj()],
                data: p.u_shared.data().to_vec(),
            },
        );
        out.insert(
            "v_shared".to_string(),
            Tensor {
                dims: vec![p.v_shared.out_dim(), p.v_shared.dim(), p.v_shared.n_proj()],
                data: p.v_shared.data().to_vec(),
            },
        );
        out.insert(
            "a".to_string(),
            Tensor {
                dims: vec![p.a.rows(), p.a.cols()],
                data: p.a.data().to_vec(),
            },
        );
        out.insert(
            "b".to_string(),
            Tensor {
                dims: vec![p.b.rows(), p.b.cols()],
                data: p.b.data().to_vec(),
            },
        );
    }
    out
}

/// Writes checkpoint tensors back into a freshly initialized model of the
/// same architecture, validating every shape.
pub fn restore_model(model: &mut PoolModel, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let expected = capture_model(model);
    for (name, want) in &expected {
        let got = tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{name}`")))?;
        if got.dims != want.dims {
            return Err(Error::Format(format!(
                "tensor `{name}` has dims {:?}, model expects {:?}",
                got.dims, want.dims
            )));
        }
    }
    for (name, t) in tensors {
        match name.as_str() {
            "reduction" => model.reduction.data_mut().copy_from_slice(&t.data),
            "codebook" => {
                let cb = model
                    .codebook
                    .as_mut()
                    .ok_or_else(|| Error::Format("model has no codebook".into()))?;
                cb.words_mut().data_mut().copy_from_slice(&t.data);
            }
            "codebook_q" => {
                let cb = model
                    .codebook_q
                    .as_mut()
                    .ok_or_else(|| Error::Format("model has no second codebook".into()))?;
                cb.words_mut().data_mut().copy_from_slice(&t.data);
            }
            "u_shared" => {
                let p = model.shared.as_mut().expect("validated above");
                p.u_shared.data_mut().copy_from_slice(&t.data);
            }
            "v_shared" => {
                let p = model.shared.as_mut().expect("validated above");
                p.v_shared.data_mut().copy_from_slice(&t.data);
            }
            "a" => {
                let p = model.shared.as_mut().expect("validated above");
                p.a.data_mut().copy_from_slice(&t.data);
            }
            "b" => {
                let p = model.shared.as_mut().expect("validated above");
                p.b.data_mut().copy_from_slice(&t.data);
            }
            other => {
                return Err(Error::Format(format!("unknown tensor `{other}`")));
            }
        }
    }
    Ok(())
}

//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "LANETCKP"
//! version    u32
//! config     u32 length + UTF-8 rendered RunConfig
//! count      u32
//! record*    u16 name length, name, u8 dtype tag, 4 x u32 dims, payload
//! ```
//!
//! All integers and scalars are little-endian.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{parameter_names, ModelParams};
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"LANETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

fn read_tensor<T: Scalar>(c: &mut Cursor, shape: Shape) -> std::result::Result<Tensor<T>, String> {
    let size = T::DTYPE.size();
    let raw = c.take(shape.numel() * size)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data).map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text = self.config.render();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.tensors.len() as u32);
        for (name, t) in &self.params.tensors {
            encode_tensor(&mut out, name, t);
        }
        out
    }

    /// Parses checkpoint bytes; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(origin, m);
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).map_err(fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32().map_err(fail)?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = c.u32().map_err(fail)? as usize;
        let text = std::str::from_utf8(c.take(len).map_err(fail)?).map_err(|_| fail("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text).map_err(|e| fail(format!("embedded config: {e}")))?;
        let count = c.u32().map_err(fail)?;
        let mut params = ModelParams {
            variant: config.variant,
            tensors: Default::default(),
        };
        for _ in 0..count {
            let n = c.u16().map_err(fail)? as usize;
            let name =
                String::from_utf8(c.take(n).map_err(fail)?.to_vec()).map_err(|_| fail("bad tensor name".into()))?;
            let tag = c.take(1).map_err(fail)?[0];
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = c.u32().map_err(fail)? as usize;
            }
            let shape = Shape::from(dims);
            let t = match DType::from_tag(tag) {
                Some(DType::F32) => read_tensor::<f32>(&mut c, shape),
                Some(DType::F64) => read_tensor::<f64>(&mut c, shape).map(|t| t.cast()),
                None => Err(format!("unknown dtype tag {tag}")),
            }
            .map_err(|m| fail(format!("tensor `{name}`: {m}")))?;
            if params.tensors.insert(name.clone(), t).is_some() {
                return Err(fail(format!("duplicate tensor `{name}`")));
            }
        }
        if c.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        let expected: BTreeSet<String> = parameter_names(config.variant, &config.arch)?.into_iter().collect();
        let found: BTreeSet<String> = params.tensors.keys().cloned().collect();
        if expected != found {
            let missing: Vec<_> = expected.difference(&found).collect();
            let extra: Vec<_> = found.difference(&expected).collect();
            return Err(fail(format!(
                "parameters do not match variant {}: missing {missing:?}, unexpected {extra:?}",
                config.variant.tag()
            )));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

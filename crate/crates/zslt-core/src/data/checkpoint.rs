//! Versioned binary checkpoints: model parameters, Adam moments, config
//! snapshot, epoch counter, and the RNG root state. Tensor payloads reuse the
//! ZSLT encoding, so round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

use super::zslt_file::{decode_tensor, encode_tensor};

const MAGIC: &[u8; 4] = b"ZSLC";
const VERSION: u16 = 1;

/// One parameter entry: value plus Adam first/second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Run configuration serialized as JSON by the caller.
    pub config_json: String,
    /// Epochs completed when the checkpoint was written.
    pub epoch: u64,
    /// Root seed; together with the epoch this reproduces every RNG substream.
    pub root_seed: u64,
    pub adam_step: u64,
    pub params: Vec<ParamEntry<T>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("checkpoint truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let len = self.u64(what)? as usize;
        if len > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{what} length {len} exceeds file size"),
            });
        }
        self.take(len, what)
    }
}

fn push_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
        push_blob(&mut out, self.config_json.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.root_seed.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            push_blob(&mut out, p.name.as_bytes());
            push_blob(&mut out, &encode_tensor(&p.value));
            push_blob(&mut out, &encode_tensor(&p.m));
            push_blob(&mut out, &encode_tensor(&p.v));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic, expected \"ZSLC\"".into(),
            });
        }
        let version = cur.u16("version")?;
        if version == 0 || version > VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let dtype = cur.u16("dtype")?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format {
                offset: 6,
                message: format!(
                    "checkpoint dtype code {dtype} does not match requested precision (code {})",
                    T::DTYPE_CODE
                ),
            });
        }
        let config_json = String::from_utf8(cur.blob("config")?.to_vec())
            .map_err(|e| Error::Format {
                offset: 8,
                message: format!("config snapshot is not UTF-8: {e}"),
            })?;
        let epoch = cur.u64("epoch")?;
        let root_seed = cur.u64("root seed")?;
        let adam_step = cur.u64("adam step")?;
        let count = cur.u64("parameter count")? as usize;
        if count > bytes.len() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                message: format!("parameter count {count} exceeds file size"),
            });
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(cur.blob("parameter name")?.to_vec())
                .map_err(|e| Error::Format {
                    offset: cur.pos as u64,
                    message: format!("parameter name is not UTF-8: {e}"),
                })?;
            let value = decode_tensor::<T>(cur.blob("parameter value")?)?;
            let m = decode_tensor::<T>(cur.blob("first moment")?)?;
            let v = decode_tensor::<T>(cur.blob("second moment")?)?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Format {
                    offset: cur.pos as u64,
                    message: format!("moment shapes for {name} do not match the parameter"),
                });
            }
            params.push(ParamEntry { name, value, m, v });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                message: format!("{} trailing bytes after checkpoint payload", bytes.len() - cur.pos),
            });
        }
        Ok(Checkpoint {
            config_json,
            epoch,
            root_seed,
            adam_step,
            params,
        })
    }
}

pub fn checkpoint_save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}

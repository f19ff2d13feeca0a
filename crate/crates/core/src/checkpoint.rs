//! Binary checkpoint: `"INBN"`, u32 version, u32-length JSON config,
//! u32 tensor count, then named little-endian f32 tensors.

use std::path::Path;

use inbn_tensor::{ParamStore, Tensor};

use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"INBN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            config: model.cfg.clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::with_params(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len(), "config")?.to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&len_u32(self.params.len(), "tensor count")?.to_le_bytes());
        for (_, name, t) in self.params.iter() {
            let n = u16::try_from(name.len())
                .map_err(|_| CoreError::Config(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.shape().len()).map_err(|_| CoreError::Config(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::Format {
                offset: 0,
                msg: format!("bad magic {magic:02x?}, expected \"INBN\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let json = std::str::from_utf8(r.take(len, "config")?).map_err(|e| r.err_at(at, format!("config is not UTF-8: {e}")))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| r.err_at(at, format!("config JSON: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|e| r.err_at(at, format!("name is not UTF-8: {e}")))?
                .to_string();
            let at = r.pos;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(r.err_at(at, format!("unknown dtype {dtype} for {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(numel * 4, "payload")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err_at(at, e.to_string()))?;
            if params.id(&name).is_some() {
                return Err(r.err_at(at, format!("duplicate tensor {name}")));
            }
            params.insert(name.clone(), t).map_err(|e| r.err_at(at, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params })
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CoreError::Config(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: String) -> CoreError {
        CoreError::Format { offset, msg }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).to_bytes()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)?.into_model()
}

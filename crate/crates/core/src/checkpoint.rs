//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LGFM"                      4 bytes magic
//! version                     u32
//! meta_len                    u32, then meta_len bytes of UTF-8 "key=value" lines
//! tensor_count                u32
//! per tensor:
//!   name_len  u16, name bytes
//!   rank      u8, then rank extents as u64
//!   values    numel f64, row-major
//! ```
//!
//! The same container carries both plain models and training snapshots;
//! readers ignore meta keys and tensors they do not recognize, so a
//! snapshot with optimizer tensors loads fine as a model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::attention::{PoolMode, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LGFM";
pub const FORMAT_VERSION: u32 = 1;

/// A parsed checkpoint file.
#[derive(Debug, Clone)]
pub struct Container {
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn meta_blob(meta: &[(String, String)]) -> Result<Vec<u8>> {
    let mut blob = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::contract(format!(
                "meta entry {k:?} contains '=' or a newline"
            )));
        }
        blob.push_str(k);
        blob.push('=');
        blob.push_str(v);
        blob.push('\n');
    }
    Ok(blob.into_bytes())
}

/// Serializes a container to `path`. Tensor order is preserved.
pub fn write_container(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let blob = meta_blob(meta)?;
    let mut buf = Vec::with_capacity(expected_len(&blob, tensors));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&blob);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.rank() as u8);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn expected_len(blob: &[u8], tensors: &[(String, &Tensor)]) -> usize {
    4 + 4
        + 4
        + blob.len()
        + 4
        + tensors
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 8 * t.rank() + 8 * t.numel())
            .sum::<usize>()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("unexpected end of file reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Reads and validates a container file.
pub fn read_container(path: &Path) -> Result<Container> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }

    let meta_len = r.u32("meta length")? as usize;
    let meta_offset = r.pos;
    let meta_bytes = r.take(meta_len, "meta block")?;
    let meta_text = std::str::from_utf8(meta_bytes).map_err(|e| Error::Format {
        offset: meta_offset + e.valid_up_to(),
        reason: "meta block is not UTF-8".into(),
    })?;
    let mut meta = Vec::new();
    for line in meta_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: meta_offset,
            reason: format!("meta line without '=': {line:?}"),
        })?;
        meta.push((k.to_string(), v.to_string()));
    }

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_offset = r.pos;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                offset: name_offset,
                reason: format!("tensor {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let extent = r.u64("tensor extent")? as usize;
            if extent == 0 {
                return Err(Error::Format {
                    offset: r.pos - 8,
                    reason: format!("tensor {name} has a zero extent"),
                });
            }
            shape.push(extent);
        }
        let numel: usize = shape.iter().product();
        if numel > buf.len() / 8 + 1 {
            return Err(Error::Format {
                offset: r.pos,
                reason: format!("tensor {name} claims {numel} values, file is too small"),
            });
        }
        let data_offset = r.pos;
        let bytes = r.take(numel * 8, "tensor values")?;
        let mut data = Vec::with_capacity(numel);
        for (j, chunk) in bytes.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: data_offset + 8 * j,
                    reason: format!("tensor {name} contains a non-finite value"),
                });
            }
            data.push(v);
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            reason: format!("{} trailing bytes after last tensor", buf.len() - r.pos),
        });
    }
    Ok(Container { version, meta, tensors })
}

/// Config keys written alongside the parameters.
pub fn config_meta(config: &ModelConfig) -> Vec<(String, String)> {
    let pool = match config.pool_mode {
        PoolMode::Average => "average",
        PoolMode::Learned => "learned",
    };
    [
        ("F", config.frames.to_string()),
        ("H", config.height.to_string()),
        ("W", config.width.to_string()),
        ("C", config.channels.to_string()),
        ("d", config.embed_dim.to_string()),
        ("blocks", config.blocks.to_string()),
        ("heads", config.heads.to_string()),
        ("window_f", config.window.f.to_string()),
        ("window_h", config.window.h.to_string()),
        ("window_w", config.window.w.to_string()),
        ("pool_mode", pool.to_string()),
        ("num_classes", config.num_classes.to_string()),
        ("seed", config.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Recovers a model config from container meta entries; keys beyond the
/// config set are ignored.
pub fn config_from_meta(container: &Container) -> Result<ModelConfig> {
    let int = |key: &str| -> Result<usize> {
        let raw = container
            .meta_value(key)
            .ok_or_else(|| Error::config(format!("checkpoint meta is missing key {key}")))?;
        raw.parse()
            .map_err(|_| Error::config(format!("checkpoint meta key {key} is not an integer: {raw:?}")))
    };
    let pool_mode = match container.meta_value("pool_mode") {
        Some("average") => PoolMode::Average,
        Some("learned") => PoolMode::Learned,
        Some(other) => {
            return Err(Error::config(format!("unknown pool_mode {other:?} in checkpoint")))
        }
        None => return Err(Error::config("checkpoint meta is missing key pool_mode")),
    };
    let seed: u64 = {
        let raw = container
            .meta_value("seed")
            .ok_or_else(|| Error::config("checkpoint meta is missing key seed"))?;
        raw.parse()
            .map_err(|_| Error::config(format!("checkpoint meta key seed is not an integer: {raw:?}")))?
    };
    Ok(ModelConfig {
        frames: int("F")?,
        height: int("H")?,
        width: int("W")?,
        channels: int("C")?,
        embed_dim: int("d")?,
        blocks: int("blocks")?,
        heads: int("heads")?,
        window: WindowSpec::new(int("window_f")?, int("window_h")?, int("window_w")?),
        pool_mode,
        num_classes: int("num_classes")?,
        seed,
    })
}

impl Model {
    /// Writes config and every parameter to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = config_meta(&self.config);
        let tensors = self.named_params();
        write_container(path, &meta, &tensors)
    }

    /// Reads a checkpoint: rebuilds the architecture from the stored config
    /// and overwrites each parameter by name. Every model parameter must be
    /// present with its exact shape; extra tensors (optimizer state, future
    /// additions) are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        model_from_container(&read_container(path)?)
    }
}

/// Builds a model from an already-parsed container.
pub(crate) fn model_from_container(container: &Container) -> Result<Model> {
    let config = config_from_meta(container)?;
    let mut model = Model::init(config)?;
    let by_name: HashMap<&str, &Tensor> = container
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    for (name, param) in model.named_params_mut() {
        let stored = *by_name
            .get(name.as_str())
            .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))?;
        if stored.shape() != param.shape() {
            return Err(Error::Dimension {
                op: "load",
                lhs: stored.shape().to_vec(),
                rhs: param.shape().to_vec(),
            });
        }
        *param = stored.clone();
    }
    Ok(model)
}

//! Binary checkpoint format.
//!
//! ```text
//! "CVSE" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! repeated: name_len u32 | name | rows u64 | cols u64 | rows*cols f64
//! crc32 u32 over every preceding byte
//! ```
//! All integers and reals are little-endian. Tensors appear in the
//! canonical order of [`EmbeddingNetwork::tensors`].

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{EmbeddingNetwork, HeadConfig, Heads, LinearLayer, NetworkConfig, ProjectionHead};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVSE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss: String,
}

fn config_record(cfg: &NetworkConfig, meta: &TrainingMeta) -> String {
    let mut s = format!(
        "image_dim={}\ntext_dim={}\nbase_dim={}\nheads={}\n",
        cfg.image_dim,
        cfg.text_dim,
        cfg.base_dim,
        cfg.head.is_some()
    );
    if let Some(h) = cfg.head {
        s.push_str(&format!("hidden_dim={}\njoint_dim={}\n", h.hidden_dim, h.out_dim));
    }
    s.push_str(&format!(
        "epoch={}\nseed={}\nloss={}\n",
        meta.epoch, meta.seed, meta.loss
    ));
    s
}

pub fn encode_checkpoint(net: &EmbeddingNetwork, meta: &TrainingMeta) -> Vec<u8> {
    let config = config_record(&net.config(), meta);
    let mut buf = Vec::with_capacity(64 + 8 * net.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    for (name, t) in net.tensors() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_config(text: &str) -> Result<(NetworkConfig, TrainingMeta), CheckpointError> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| CheckpointError::Malformed(format!("config missing {k}")))
    };
    let num = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("config field {k} is not an integer")))
    };
    let heads = match get("heads")? {
        "true" => true,
        "false" => false,
        other => return Err(CheckpointError::Malformed(format!("heads={other}"))),
    };
    let cfg = NetworkConfig {
        image_dim: num("image_dim")?,
        text_dim: num("text_dim")?,
        base_dim: num("base_dim")?,
        head: if heads {
            Some(HeadConfig {
                hidden_dim: num("hidden_dim")?,
                out_dim: num("joint_dim")?,
            })
        } else {
            None
        },
    };
    cfg.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let meta = TrainingMeta {
        epoch: num("epoch")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| CheckpointError::Malformed("seed is not an integer".into()))?,
        loss: get("loss")?.to_string(),
    };
    Ok((cfg, meta))
}

fn expected_shapes(cfg: &NetworkConfig) -> Vec<(&'static str, usize, usize)> {
    let mut v = vec![
        ("image_base.weight", cfg.base_dim, cfg.image_dim),
        ("image_base.bias", 1, cfg.base_dim),
        ("text_base.weight", cfg.base_dim, cfg.text_dim),
        ("text_base.bias", 1, cfg.base_dim),
    ];
    if let Some(h) = cfg.head {
        for side in ["image_head", "text_head"] {
            let names: [&'static str; 4] = if side == "image_head" {
                [
                    "image_head.hidden.weight",
                    "image_head.hidden.bias",
                    "image_head.out.weight",
                    "image_head.out.bias",
                ]
            } else {
                [
                    "text_head.hidden.weight",
                    "text_head.hidden.bias",
                    "text_head.out.weight",
                    "text_head.out.bias",
                ]
            };
            v.push((names[0], h.hidden_dim, cfg.base_dim));
            v.push((names[1], 1, h.hidden_dim));
            v.push((names[2], h.out_dim, h.hidden_dim));
            v.push((names[3], 1, h.out_dim));
        }
    }
    v
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EmbeddingNetwork, TrainingMeta), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config record")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| CheckpointError::Malformed("config record is not UTF-8".into()))?;
    let (cfg, meta) = parse_config(config_text)?;

    let mut tensors = Vec::new();
    for (name, rows, cols) in expected_shapes(&cfg) {
        let name_len = r.u32("tensor name length")? as usize;
        let found = r.take(name_len, "tensor name")?;
        if found != name.as_bytes() {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor {name}, found {:?}",
                String::from_utf8_lossy(found)
            )));
        }
        let (fr, fc) = (r.u64(name)? as usize, r.u64(name)? as usize);
        if (fr, fc) != (rows, cols) {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} is {fr}x{fc}, expected {rows}x{cols}"
            )));
        }
        let raw = r.take(rows * cols * 8, name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(values);
    }
    let body_end = r.pos;
    let remaining = bytes.len() - body_end;
    if remaining < 4 {
        return Err(CheckpointError::Truncated("checksum".into()));
    }
    if remaining > 4 {
        return Err(CheckpointError::TrailingBytes(remaining - 4));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let shapes = expected_shapes(&cfg);
    let mut mats = Vec::with_capacity(tensors.len());
    for ((name, rows, cols), values) in shapes.into_iter().zip(tensors) {
        mats.push(Matrix::new(rows, cols, values).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?);
    }
    let mut it = mats.into_iter();
    let mut layer = || LinearLayer {
        weight: it.next().unwrap(),
        bias: it.next().unwrap(),
    };
    let image_base = layer();
    let text_base = layer();
    let heads = cfg.head.map(|_| {
        let image = ProjectionHead {
            hidden: layer(),
            out: layer(),
        };
        let text = ProjectionHead {
            hidden: layer(),
            out: layer(),
        };
        Heads { image, text }
    });
    let net = EmbeddingNetwork::from_parts(image_base, text_base, heads)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((net, meta))
}

pub fn save_checkpoint(net: &EmbeddingNetwork, meta: &TrainingMeta, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(net, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbeddingNetwork, TrainingMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

//! Binary feature tables.
//!
//! ```text
//! "FVT1" | version u32 | rows u64 | dim u64
//! repeated rows times: id_len u16 | id (UTF-8) | dim f64
//! crc32 u32 over every preceding byte
//! ```
//! Little-endian throughout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"FVT1";
pub const FEATURE_VERSION: u32 = 1;

/// Feature vectors keyed by unique string ids, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    feats: Matrix,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, feats: Matrix) -> Result<Self, DataError> {
        if ids.len() != feats.rows() {
            return Err(DataError::DimMismatch {
                what: "feature rows vs ids".into(),
                expected: ids.len(),
                found: feats.rows(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.len() > u16::MAX as usize {
                return Err(DataError::InvalidId(format!("id of {} bytes is too long", id.len())));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, feats, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feats.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn feats(&self) -> &Matrix {
        &self.feats
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn encode_feature_table(table: &FeatureTable) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + table.len() * (16 + 8 * table.dim()) + 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u64).to_le_bytes());
    for (i, id) in table.ids.iter().enumerate() {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for v in table.feats.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_feature_table(bytes: &[u8]) -> Result<FeatureTable, DataError> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8], DataError> {
        if bytes.len().saturating_sub(pos) < n {
            return Err(DataError::Truncated(what.to_string()));
        }
        let out = &bytes[pos..pos + n];
        pos += n;
        Ok(out)
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if &magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let rows = u64::from_le_bytes(take(8, "row count")?.try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(take(8, "dimension")?.try_into().unwrap()) as usize;
    if rows == 0 || dim == 0 {
        return Err(DataError::DimMismatch {
            what: "feature table header (rows, dim must be >= 1)".into(),
            expected: 1,
            found: rows.min(dim),
        });
    }
    let mut ids = Vec::with_capacity(rows.min(1 << 20));
    let mut values = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 24));
    for r in 0..rows {
        let what = format!("row {r} of {rows}");
        let id_len = u16::from_le_bytes(take(2, &what)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(id_len, &what)?)
            .map_err(|_| DataError::InvalidId(format!("row {r} id is not UTF-8")))?
            .to_string();
        let raw = take(8 * dim, &what)?;
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(DataError::NonFinite(id));
            }
            values.push(v);
        }
        ids.push(id);
    }
    let body_end = pos;
    let remaining = bytes.len() - body_end;
    if remaining < 4 {
        return Err(DataError::Truncated("checksum".into()));
    }
    if remaining > 4 {
        return Err(DataError::TrailingBytes(remaining - 4));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    let feats = Matrix::new(rows, dim, values).expect("shape and finiteness checked");
    FeatureTable::new(ids, feats)
}

pub fn write_feature_file(table: &FeatureTable, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_feature_table(table)).map_err(|e| DataError::io(path, e))
}

pub fn load_feature_file(path: &Path) -> Result<FeatureTable, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_feature_table(&bytes)
}

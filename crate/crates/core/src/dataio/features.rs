//! Binary cell-feature files.
//!
//! ```text
//! "CKNF"  u32 version  u32 images  u32 rows  u32 cols  u32 dim
//! images·rows·cols·dim × f32          (image-major, cell-major)
//! images × (u32 byte length, UTF-8 id)
//! ```
//!
//! All integers and floats little-endian. The file must end exactly after
//! the last id.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const FEATURE_MAGIC: &[u8; 4] = b"CKNF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub grid: GridSpec,
    pub dim: usize,
    pub ids: Vec<String>,
    pub features: Vec<Tensor>,
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], context: &'a str) -> Self {
        Reader { bytes, pos: 0, context }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Truncated {
                context: self.context.to_string(),
                expected: (self.pos + len) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let at = self.offset();
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.format_error(at, "string is not valid UTF-8"))
    }

    pub(crate) fn format_error(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset,
            message: message.into(),
        }
    }
}

/// Parses a feature file held in memory.
pub fn decode_features(bytes: &[u8], context: &str) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, context);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(r.format_error(0, "bad magic, expected CKNF"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            what: "feature file",
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let images = r.u32()? as u64;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if rows == 0 || cols == 0 || dim == 0 {
        return Err(r.format_error(12, format!("zero-sized header fields: {rows}x{cols}, dim {dim}")));
    }
    let grid = GridSpec::new(rows, cols)?;
    let per_image = (rows as u64)
        .checked_mul(cols as u64)
        .and_then(|c| c.checked_mul(dim as u64))
        .ok_or_else(|| r.format_error(16, "header sizes overflow"))?;
    let body = per_image
        .checked_mul(images)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| r.format_error(8, "header sizes overflow"))?;
    // Each id needs at least its 4-byte length.
    let minimum = HEADER_LEN + body + 4 * images;
    if (bytes.len() as u64) < minimum {
        return Err(Error::Truncated {
            context: context.to_string(),
            expected: minimum,
            actual: bytes.len() as u64,
        });
    }
    let n = rows * cols;
    let mut features = Vec::with_capacity(images as usize);
    for _ in 0..images {
        let raw = r.take(per_image as usize * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        features.push(Array2::from_shape_vec((n, dim), data).expect("sized by header"));
    }
    let mut ids = Vec::with_capacity(images as usize);
    let mut seen = HashSet::new();
    for _ in 0..images {
        let at = r.offset();
        let id = r.string()?;
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(r.format_error(at, format!("invalid image id {id:?}")));
        }
        if !seen.insert(id.clone()) {
            return Err(r.format_error(at, format!("duplicate image id {id:?}")));
        }
        ids.push(id);
    }
    if r.remaining() != 0 {
        return Err(r.format_error(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(FeatureSet {
        grid,
        dim,
        ids,
        features,
    })
}

/// Serializes features (stored as f32).
pub fn encode_features(set: &FeatureSet) -> Result<Vec<u8>> {
    if set.ids.len() != set.features.len() {
        return Err(Error::invalid("feature set ids and maps differ in count"));
    }
    let n = set.grid.n();
    let mut out = Vec::with_capacity(24 + set.features.len() * n * set.dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        set.ids.len() as u32,
        set.grid.rows() as u32,
        set.grid.cols() as u32,
        set.dim as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, f) in set.ids.iter().zip(&set.features) {
        if f.dim() != (n, set.dim) {
            return Err(Error::invalid(format!("image {id:?}: feature map {:?}", f.dim())));
        }
        for &x in f.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for id in &set.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    std::fs::write(path, encode_features(set)?).map_err(|e| Error::io(path, e))
}

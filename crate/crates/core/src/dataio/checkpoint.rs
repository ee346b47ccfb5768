//! Model checkpoints.
//!
//! ```text
//! "CKNC"  u32 version
//! u32 length, TOML header (network config, label partition, vocabulary,
//!                          training state)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rows, u32 cols, rows·cols × f64
//! ```
//!
//! Little-endian throughout; tensors keep their full f64 bits.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::features::Reader;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{ModelParams, NetworkConfig};
use crate::training::GroupPartition;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer progress at save time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocab: Vec<String>,
    state: TrainState,
    network: NetworkConfig,
    partition: GroupPartition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub partition: GroupPartition,
    pub vocab: Vec<String>,
    pub state: TrainState,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, partition: &GroupPartition, vocab: &[String], state: TrainState) -> Self {
        Checkpoint {
            network: params.config().clone(),
            partition: partition.clone(),
            vocab: vocab.to_vec(),
            state,
            tensors: params.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Parameters under the stored configuration.
    pub fn params(&self) -> Result<ModelParams> {
        self.params_for(&self.network)
    }

    /// Parameters under a caller-supplied configuration; every tensor is
    /// checked against it.
    pub fn params_for(&self, network: &NetworkConfig) -> Result<ModelParams> {
        ModelParams::from_named(network, &self.partition.group_sizes(), self.tensors.clone())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header {
        vocab: ck.vocab.clone(),
        state: ck.state,
        network: ck.network.clone(),
        partition: ck.partition.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len(), "header length")?;
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, ck.tensors.len(), "tensor count")?;
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.nrows(), "rows")?;
        put_u32(&mut out, t.ncols(), "cols")?;
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], context: &str) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, context);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.format_error(0, "bad magic, expected CKNC"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let at = r.offset();
    let header = r.string()?;
    let header: Header = toml::from_str(&header).map_err(|e| r.format_error(at, format!("header: {e}")))?;
    header.network.validate()?;
    header.partition.validate()?;
    if header.partition.n_labels() != header.vocab.len() {
        return Err(r.format_error(at, "vocabulary and partition disagree on the label count"));
    }
    let count = r.u32()? as usize;
    // Each tensor record needs at least 12 bytes.
    if count > r.remaining() / 12 {
        return Err(r.format_error(r.offset() - 4, format!("tensor count {count} exceeds file size")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let at = r.offset();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.format_error(at, "tensor size overflows"))?;
        let raw = r.take(len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Array2::from_shape_vec((rows, cols), data).expect("sized above")));
    }
    if r.remaining() != 0 {
        return Err(r.format_error(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    let ck = Checkpoint {
        network: header.network,
        partition: header.partition,
        vocab: header.vocab,
        state: header.state,
        tensors,
    };
    ck.params()?;
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::network::LayerConfig;

    fn checkpoint() -> Checkpoint {
        let mut net = NetworkConfig::uniform(GridSpec::new(2, 3).unwrap(), 4, 2, LayerConfig::new(2, 6, 0.1, 0.62));
        net.pos_dim = 2;
        net.key_dim = 4;
        let partition = GroupPartition::from_parts(3, vec![vec![0, 2], vec![1]], vec![0.75, 2.0]).unwrap();
        let params = ModelParams::init(&net, &partition.group_sizes(), 3).unwrap();
        let state = TrainState {
            epoch: 4,
            step: 40,
            total_steps: 100,
            seed: 3,
            learning_rate: 1.0 / 3.0,
        };
        Checkpoint::new(&params, &partition, &["a".into(), "b".into(), "c".into()], state)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = checkpoint();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_grid_names_tensor() {
        let ck = checkpoint();
        let mut other = ck.network.clone();
        other.grid = GridSpec::new(3, 3).unwrap();
        match ck.params_for(&other) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "neighborhood.up"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let bytes = encode_checkpoint(&checkpoint()).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bad, "m"),
            Err(Error::Version { found: 2, .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], "m"),
            Err(Error::Truncated { .. })
        ));
    }
}

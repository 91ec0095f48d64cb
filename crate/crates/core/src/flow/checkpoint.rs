//! Self-contained model files.
//!
//! Layout: 8-byte magic `SLAYRCKP`, little-endian `u32` format version,
//! little-endian `u64` header length, UTF-8 JSON header, then every
//! parameter tensor as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{VelocityNet, VelocityNetConfig};
use crate::embedding::{EmbeddingTable, PcaProjector, Vocabulary};
use crate::error::{Error, Result};
use crate::layout::DatasetStats;

const MAGIC: &[u8; 8] = b"SLAYRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: VelocityNetConfig,
    stats: DatasetStats,
    projector: PcaProjector,
    table: EmbeddingTable,
    tensors: Vec<TensorEntry>,
}

/// A trained network with everything needed to sample and decode.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub stats: DatasetStats,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(net: VelocityNet, stats: DatasetStats, vocab: Vocabulary) -> Result<Self> {
        let cfg = net.config();
        if stats.width() != cfg.token_width() || vocab.d() != cfg.d || vocab.full_dim() != cfg.prompt_dim {
            return Err(Error::ShapeMismatch("network, statistics and vocabulary dimensions disagree".into()));
        }
        Ok(Self { net, stats, vocab })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let params = self.net.params();
        let header = Header {
            version: FORMAT_VERSION,
            config: self.net.config().clone(),
            stats: self.stats.clone(),
            projector: self.vocab.projector.clone(),
            table: self.vocab.table.clone(),
            tensors: params
                .specs
                .iter()
                .map(|s| TensorEntry { name: s.name.clone(), shape: s.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut blob = Vec::with_capacity(params.len() * 4);
        for spec in &params.specs {
            for &v in &params.values[spec.range()] {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut net = VelocityNet::zeroed(header.config)?;
        let expected: Vec<(&str, &[usize])> =
            net.params().specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice())).collect();
        let found: Vec<(&str, &[usize])> =
            header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        if expected != found {
            return Err(bad("tensor index does not match the configured network"));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        if blob.len() != net.parameter_count() * 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                net.parameter_count() * 4,
                blob.len()
            )));
        }
        for (v, chunk) in net.params_mut().values.iter_mut().zip(blob.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
        let vocab = Vocabulary::new(header.table, header.projector)?;
        Self::new(net, header.stats, vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rounds parameters to `f32`, matching what a save/load cycle yields.
    pub fn quantize(&mut self) {
        for v in &mut self.net.params_mut().values {
            *v = *v as f32 as f64;
        }
    }
}

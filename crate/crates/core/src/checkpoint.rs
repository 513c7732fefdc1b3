//! Versioned little-endian binary checkpoint: layer shapes and parameters,
//! block ranges and block states. `f64` values are stored as raw bits, so a
//! save/load cycle is bitwise exact.

use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::blocks::{BlockState, GlobalModel};
use crate::nn::{Activation, DenseLayer, Tensor2};

const MAGIC: &[u8; 8] = b"PROFLCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<DenseLayer>,
    /// Hidden-layer index ranges per block with their states; empty for
    /// models trained end to end.
    pub blocks: Vec<(Range<usize>, BlockState)>,
}

impl Checkpoint {
    pub fn from_model(model: &GlobalModel) -> Self {
        Self {
            layers: model.final_layers(),
            blocks: model
                .plan()
                .ranges()
                .iter()
                .cloned()
                .zip(model.states().iter().copied())
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
        Self {
            layers,
            blocks: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.layers.len() as u32);
        for l in &self.layers {
            put_u32(&mut out, l.fan_in() as u32);
            put_u32(&mut out, l.fan_out() as u32);
            out.push(l.activation.code());
            let mut params = Vec::with_capacity(l.param_count());
            l.write_params(&mut params);
            for v in params {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        put_u32(&mut out, self.blocks.len() as u32);
        for (r, s) in &self.blocks {
            put_u32(&mut out, r.start as u32);
            put_u32(&mut out, r.end as u32);
            out.push(s.code());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = rd.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let fan_in = rd.u32()? as usize;
            let fan_out = rd.u32()? as usize;
            let code = rd.take(1)?[0];
            let act = Activation::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("activation code {code}")))?;
            let count = fan_in
                .checked_mul(fan_out)
                .and_then(|w| w.checked_add(fan_out))
                .ok_or_else(|| CheckpointError::Corrupt("layer size overflow".into()))?;
            let raw = rd.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let params: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let weights = Tensor2::from_vec(fan_in, fan_out, params[..fan_in * fan_out].to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let layer = DenseLayer::from_parts(weights, params[fan_in * fan_out..].to_vec(), act)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            layers.push(layer);
        }
        let nb = rd.u32()? as usize;
        let mut blocks = Vec::with_capacity(nb.min(1024));
        for _ in 0..nb {
            let start = rd.u32()? as usize;
            let end = rd.u32()? as usize;
            let code = rd.take(1)?[0];
            let state = BlockState::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("block state {code}")))?;
            blocks.push((start..end, state));
        }
        if rd.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { layers, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
